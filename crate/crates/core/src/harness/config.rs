use serde::{Deserialize, Serialize};

use crate::codec;
use crate::data::{DatasetConfig, NoiseSpec};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, ModelKind};
use crate::seed::Seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    RegressionCcc,
    BinaryClassification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// SGD only.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 0.0,
        }
    }
}

/// Frozen per-modality clip encoder used to turn frames into features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub hidden: usize,
    pub kernel: usize,
    pub pool: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            hidden: 16,
            kernel: 3,
            pool: 2,
        }
    }
}

/// Which dataset folds play validation and test; the rest train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub val_fold: usize,
    pub test_fold: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            val_fold: 1,
            test_fold: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelKind,
    pub fusion: FusionConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Optimizer steps after which training stops regardless of epochs.
    pub max_steps: Option<usize>,
    pub lr_grid: Vec<f64>,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub split: SplitConfig,
    /// Train on only the first `n` training samples.
    pub train_subset: Option<usize>,
    pub task: Task,
    /// Seeds used by the ablation runner.
    pub ablation_seeds: Vec<u64>,
}

pub const DEFAULT_LR_GRID: [f64; 3] = [8e-4, 6e-4, 3e-4];

impl Default for RunConfig {
    fn default() -> Self {
        preset("desk").expect("desk preset exists")
    }
}

impl RunConfig {
    pub fn hash(&self) -> u64 {
        codec::config_hash(self)
    }

    pub fn hash_hex(&self) -> String {
        codec::hash_hex(self.hash())
    }

    pub fn seed(&self) -> Seed {
        Seed(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.dataset.validate()?;
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        let lr = self.optimizer.learning_rate;
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {lr} must be positive")));
        }
        if self.lr_grid.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("invalid learning-rate grid {:?}", self.lr_grid)));
        }
        let k = self.dataset.folds;
        let (v, t) = (self.split.val_fold, self.split.test_fold);
        if v >= k || t >= k || v == t {
            return Err(Error::Config(format!(
                "validation fold {v} and test fold {t} must differ and lie below {k}"
            )));
        }
        if k < 3 {
            return Err(Error::Config("need at least 3 folds for train/validation/test".into()));
        }
        if self.task == Task::BinaryClassification {
            if self.fusion.head_output_dim != 2 {
                return Err(Error::Config("binary classification needs head_output_dim = 2".into()));
            }
            if self.fusion.per_clip {
                return Err(Error::Config(
                    "binary classification uses sequence-level labels; disable per_clip".into(),
                ));
            }
        } else if self.fusion.head_output_dim != self.dataset.num_targets {
            return Err(Error::Config(format!(
                "regression head has {} outputs for {} targets",
                self.fusion.head_output_dim, self.dataset.num_targets
            )));
        }
        Ok(())
    }

    /// Stable label used as `run_id` in metrics.
    pub fn run_label(&self) -> String {
        format!("{}-s{}", self.model, self.seed)
    }

    /// Parses `text` over the `desk` preset.
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_over(&RunConfig::default(), text)
    }

    /// Parses `text` as a partial config layered over `base`; tables merge
    /// key by key, so a file only needs the values it changes.
    pub fn from_toml_over(base: &RunConfig, text: &str) -> Result<Self> {
        let bad = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let overlay: toml::Table = toml::from_str(text).map_err(|e| bad(&e))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| bad(&e))?;
        merge(&mut merged, overlay);
        let cfg: RunConfig = toml::Value::Table(merged).try_into().map_err(|e| bad(&e))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (key, value) in from {
        match (into.get_mut(&key), value) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => merge(dst, src),
            (_, value) => {
                into.insert(key, value);
            }
        }
    }
}

pub const PRESETS: [&str; 6] = ["desk", "smoke", "ablation", "overfit", "affwild2-scale", "biovid-scale"];

/// Named configurations. `desk` is the default.
pub fn preset(name: &str) -> Result<RunConfig> {
    let desk_fusion = FusionConfig {
        model_dim: 64,
        num_heads: 4,
        ff_dim: 128,
        dropout_rate: 0.1,
        ..FusionConfig::default()
    };
    let desk = RunConfig {
        model: ModelKind::Jmt,
        fusion: desk_fusion.clone(),
        optimizer: OptimizerConfig::default(),
        batch_size: 16,
        max_epochs: 30,
        patience: 5,
        max_steps: None,
        lr_grid: DEFAULT_LR_GRID.to_vec(),
        seed: 0,
        dataset: DatasetConfig::default(),
        backbone: BackboneConfig::default(),
        split: SplitConfig::default(),
        train_subset: None,
        task: Task::RegressionCcc,
        ablation_seeds: vec![0, 1, 2, 3, 4],
    };
    Ok(match name {
        "desk" => desk,
        "smoke" => RunConfig {
            fusion: FusionConfig {
                model_dim: 8,
                num_heads: 2,
                ff_dim: 16,
                ..desk_fusion
            },
            dataset: DatasetConfig {
                num_subjects: 6,
                sequences_per_subject: 4,
                clips_per_sequence: 4,
                folds: 3,
                ..DatasetConfig::default()
            },
            backbone: BackboneConfig {
                hidden: 4,
                ..BackboneConfig::default()
            },
            batch_size: 8,
            max_epochs: 2,
            patience: 1,
            lr_grid: vec![1e-3, 3e-4],
            ablation_seeds: vec![0, 1],
            ..desk
        },
        "ablation" => ablation_preset(desk),
        "overfit" => RunConfig {
            fusion: FusionConfig {
                model_dim: 32,
                num_heads: 4,
                ff_dim: 64,
                dropout_rate: 0.0,
                ..desk_fusion
            },
            dataset: DatasetConfig {
                noise: NoiseSpec {
                    gaussian_sigma: [0.05, 0.05],
                    ..NoiseSpec::default()
                },
                ..DatasetConfig::default()
            },
            batch_size: 32,
            max_epochs: 500,
            patience: 500,
            max_steps: Some(500),
            train_subset: Some(32),
            ..desk
        },
        "affwild2-scale" => RunConfig {
            fusion: FusionConfig {
                dropout_rate: 0.8,
                ..FusionConfig::default()
            },
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Sgd,
                learning_rate: DEFAULT_LR_GRID[0],
                ..OptimizerConfig::default()
            },
            batch_size: 32,
            max_epochs: 5,
            patience: 1,
            ..desk
        },
        "biovid-scale" => RunConfig {
            fusion: FusionConfig {
                dropout_rate: 0.8,
                head_output_dim: 2,
                ..FusionConfig::default()
            },
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                learning_rate: 5e-6,
                ..OptimizerConfig::default()
            },
            batch_size: 128,
            max_epochs: 50,
            patience: 5,
            lr_grid: vec![5e-6],
            task: Task::BinaryClassification,
            ..desk
        },
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    })
}

/// Both modalities noisy with shared blackouts; the setting the ablation
/// ordering is measured on.
fn ablation_preset(desk: RunConfig) -> RunConfig {
    RunConfig {
        fusion: FusionConfig {
            per_clip: true,
            ..desk.fusion.clone()
        },
        dataset: DatasetConfig {
            sequences_per_subject: 24,
            smoothness: 0.97,
            interaction: 0.5,
            noise: NoiseSpec {
                gaussian_sigma: [0.3, 0.3],
                blackout_prob: [0.15, 0.15],
                correlated_blackout_prob: 0.25,
                burst: 8,
                seed: 0,
            },
            ..DatasetConfig::default()
        },
        max_epochs: 25,
        patience: 5,
        ..desk
    }
}
