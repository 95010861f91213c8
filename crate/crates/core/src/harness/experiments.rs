//! Learning-rate grid search, subject k-fold and the variant ablation.

use std::fmt::Write as _;

use serde::Serialize;

use crate::data::{make_folds, SyntheticDataset};
use crate::error::{Error, Result};
use crate::fusion::ModelKind;
use crate::metrics::MetricsRecord;
use crate::seed::Seed;

use super::config::{RunConfig, Task};
use super::features::FeatureSet;
use super::train::{prepare_features, train, TrainOptions};

/// Sink for records produced by multi-run experiments.
pub type RecordSink<'a> = Option<&'a mut dyn FnMut(&MetricsRecord) -> Result<()>>;

fn relay(sink: &mut RecordSink<'_>, record: &MetricsRecord) -> Result<()> {
    match sink {
        Some(f) => f(record),
        None => Ok(()),
    }
}

fn score(record: &MetricsRecord, task: Task) -> f64 {
    let v = match task {
        Task::RegressionCcc => record.mean_ccc,
        Task::BinaryClassification => record.accuracy,
    };
    v.unwrap_or(f64::NAN)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct GridPoint {
    pub learning_rate: f64,
    pub best_val_metric: f64,
    pub best_epoch: Option<usize>,
    pub test_metric: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub points: Vec<GridPoint>,
    pub best_index: usize,
    pub best_config: RunConfig,
    pub records: Vec<MetricsRecord>,
}

pub fn grid_run_id(cfg: &RunConfig, lr: f64) -> String {
    format!("{}-lr{lr:e}", cfg.run_label())
}

/// One training run per learning rate; the best validation score wins and
/// ties go to the lower rate.
pub fn grid_search(cfg: &RunConfig, features: &FeatureSet, mut sink: RecordSink<'_>) -> Result<GridResult> {
    if cfg.lr_grid.is_empty() {
        return Err(Error::Config("learning-rate grid is empty".into()));
    }
    let mut points = Vec::new();
    let mut records = Vec::new();
    for &lr in &cfg.lr_grid {
        let mut run = cfg.clone();
        run.optimizer.learning_rate = lr;
        let mut forward = |r: &MetricsRecord| relay(&mut sink, r);
        let out = train(
            &run,
            features,
            TrainOptions {
                run_id: Some(grid_run_id(cfg, lr)),
                on_record: Some(&mut forward),
                ..TrainOptions::default()
            },
        )?;
        points.push(GridPoint {
            learning_rate: lr,
            best_val_metric: out.best_val_metric,
            best_epoch: out.best_epoch,
            test_metric: out.test.as_ref().map(|r| score(r, cfg.task)),
        });
        records.extend(out.records);
    }
    let mut best_index = 0;
    for (i, p) in points.iter().enumerate() {
        let b = &points[best_index];
        let better = p.best_val_metric > b.best_val_metric
            || (p.best_val_metric == b.best_val_metric && p.learning_rate < b.learning_rate)
            || b.best_val_metric.is_nan() && !p.best_val_metric.is_nan();
        if better {
            best_index = i;
        }
    }
    let mut best_config = cfg.clone();
    best_config.optimizer.learning_rate = points[best_index].learning_rate;
    Ok(GridResult {
        points,
        best_index,
        best_config,
        records,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub val_fold: usize,
    pub best_epoch: Option<usize>,
    pub best_val_metric: f64,
    pub test_metric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct KFoldResult {
    pub k: usize,
    pub folds: Vec<FoldResult>,
    pub mean: f64,
    pub std: f64,
    #[serde(skip)]
    pub records: Vec<MetricsRecord>,
}

/// Fold `i` is the test set, fold `i + 1 (mod k)` validates, the rest train.
pub fn kfold_run(
    cfg: &RunConfig,
    dataset: &SyntheticDataset,
    k: usize,
    mut sink: RecordSink<'_>,
) -> Result<KFoldResult> {
    if k < 3 {
        return Err(Error::Config(format!(
            "k-fold needs k >= 3 for separate validation and test folds, got {k}"
        )));
    }
    let folds = make_folds(
        dataset.config.num_subjects,
        k,
        Seed(dataset.config.seed).derive("folds"),
    )?;
    let features = prepare_features(cfg, dataset)?.with_folds(&folds);
    let mut results = Vec::with_capacity(k);
    let mut records = Vec::new();
    for fold in 0..k {
        let mut run = cfg.clone();
        run.dataset.folds = k;
        run.split.test_fold = fold;
        run.split.val_fold = (fold + 1) % k;
        let mut forward = |r: &MetricsRecord| relay(&mut sink, r);
        let out = train(
            &run,
            &features,
            TrainOptions {
                run_id: Some(format!("{}-fold{fold}", cfg.run_label())),
                on_record: Some(&mut forward),
                ..TrainOptions::default()
            },
        )?;
        let test = out
            .test
            .as_ref()
            .ok_or_else(|| Error::Input(format!("fold {fold} produced no test record")))?;
        results.push(FoldResult {
            fold,
            val_fold: run.split.val_fold,
            best_epoch: out.best_epoch,
            best_val_metric: out.best_val_metric,
            test_metric: score(test, cfg.task),
        });
        records.extend(out.records);
    }
    let (mean, std) = mean_std(&results.iter().map(|r| r.test_metric).collect::<Vec<_>>());
    Ok(KFoldResult {
        k,
        folds: results,
        mean,
        std,
        records,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub model: ModelKind,
    /// Test score per seed, in seed order.
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub metric: String,
    pub rows: Vec<AblationRow>,
    /// Data-order hash per seed, shared by every variant.
    pub data_order_hashes: Vec<String>,
    #[serde(skip)]
    pub records: Vec<MetricsRecord>,
}

impl AblationTable {
    pub fn row(&self, kind: ModelKind) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.model == kind)
    }

    /// Seeds on which `a` strictly beats `b`.
    pub fn wins(&self, a: ModelKind, b: ModelKind) -> usize {
        match (self.row(a), self.row(b)) {
            (Some(ra), Some(rb)) => ra.scores.iter().zip(&rb.scores).filter(|(x, y)| x > y).count(),
            _ => 0,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,seed,test_metric\n");
        for row in &self.rows {
            for (seed, s) in self.seeds.iter().zip(&row.scores) {
                let _ = writeln!(out, "{},{seed},{s}", row.model);
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<12} {:>10} {:>10}  per-seed {}\n",
            "model", "mean", "std", self.metric
        );
        for row in &self.rows {
            let per: Vec<String> = row.scores.iter().map(|s| format!("{s:.4}")).collect();
            let _ = writeln!(
                out,
                "{:<12} {:>10.4} {:>10.4}  {}",
                row.model.name(),
                row.mean,
                row.std,
                per.join(" ")
            );
        }
        let _ = writeln!(
            out,
            "jmt > vanilla on {}/{} seeds",
            self.wins(ModelKind::Jmt, ModelKind::Vanilla),
            self.seeds.len()
        );
        out
    }
}

/// Trains every model kind under an identical protocol for each seed. A
/// seed fixes the dataset, the frozen backbones, the data order and the
/// model initialisation.
pub fn ablation_run(base: &RunConfig, seeds: &[u64], mut sink: RecordSink<'_>) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut scores = vec![Vec::with_capacity(seeds.len()); ModelKind::ALL.len()];
    let mut hashes = Vec::with_capacity(seeds.len());
    let mut records = Vec::new();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.dataset.seed = seed;
        let dataset = SyntheticDataset::generate(&cfg.dataset)?;
        let features = prepare_features(&cfg, &dataset)?;
        let mut seed_hash: Option<String> = None;
        for (i, &kind) in ModelKind::ALL.iter().enumerate() {
            cfg.model = kind;
            let mut forward = |r: &MetricsRecord| relay(&mut sink, r);
            let out = train(
                &cfg,
                &features,
                TrainOptions {
                    on_record: Some(&mut forward),
                    ..TrainOptions::default()
                },
            )?;
            match &seed_hash {
                None => seed_hash = Some(out.data_order_hash.clone()),
                Some(h) if *h != out.data_order_hash => {
                    return Err(Error::Usage(format!(
                        "data order differs between variants on seed {seed}"
                    )))
                }
                Some(_) => {}
            }
            let test = out
                .test
                .as_ref()
                .ok_or_else(|| Error::Input("run produced no test record".into()))?;
            scores[i].push(score(test, cfg.task));
            records.extend(out.records);
        }
        hashes.push(seed_hash.unwrap_or_default());
    }
    let rows = ModelKind::ALL
        .iter()
        .zip(scores)
        .map(|(&model, scores)| {
            let (mean, std) = mean_std(&scores);
            AblationRow {
                model,
                scores,
                mean,
                std,
            }
        })
        .collect();
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        metric: match base.task {
            Task::RegressionCcc => "mean_ccc".into(),
            Task::BinaryClassification => "accuracy".into(),
        },
        rows,
        data_order_hashes: hashes,
        records,
    })
}
