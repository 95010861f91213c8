//! Frozen-backbone clip features and batch assembly.

use crate::backbones::{extract_clip_features, TemporalConvBackbone, TemporalConvConfig};
use crate::data::{FoldAssignment, Modality, SyntheticDataset};
use crate::error::{Error, Result};
use crate::seed::Seed;
use crate::tensor::Tensor;

use super::config::{BackboneConfig, Task};

/// Per-sample clip features for both modalities plus targets, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub clips: usize,
    pub dim: usize,
    pub num_targets: usize,
    /// `[samples * clips, dim]`
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// Per-clip target means, `[samples * clips, num_targets]`.
    pub clip_targets: Vec<f64>,
    /// Per-sample target means, `[samples, num_targets]`.
    pub sample_targets: Vec<f64>,
    pub labels: Vec<usize>,
    /// Dataset fold of each sample.
    pub fold: Vec<usize>,
    pub subject: Vec<u32>,
}

impl FeatureSet {
    /// Embeds every clip with a randomly initialised, frozen backbone per
    /// modality. The backbones depend only on `seed`.
    pub fn extract(dataset: &SyntheticDataset, backbone: &BackboneConfig, dim: usize, seed: Seed) -> Result<Self> {
        let cfg = &dataset.config;
        let nets = [Modality::A, Modality::B]
            .iter()
            .map(|&m| {
                TemporalConvBackbone::new(
                    TemporalConvConfig {
                        in_channels: cfg.channels[m.index()],
                        hidden: backbone.hidden,
                        kernel: backbone.kernel,
                        pool: backbone.pool,
                        clip_length: cfg.clip_length,
                        out_dim: dim,
                    },
                    &mut seed.derive(&format!("backbone-{m:?}")).rng(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let k = cfg.num_targets;
        let clips = cfg.clips_per_sequence;
        let n = dataset.len();
        let mut set = FeatureSet {
            clips,
            dim,
            num_targets: k,
            a: Vec::with_capacity(n * clips * dim),
            b: Vec::with_capacity(n * clips * dim),
            clip_targets: Vec::with_capacity(n * clips * k),
            sample_targets: Vec::with_capacity(n * k),
            labels: Vec::with_capacity(n),
            fold: Vec::with_capacity(n),
            subject: Vec::with_capacity(n),
        };
        for s in &dataset.samples {
            set.a
                .extend(extract_clip_features(&s.a, &nets[0], cfg.clip_length)?.to_vec());
            set.b
                .extend(extract_clip_features(&s.b, &nets[1], cfg.clip_length)?.to_vec());
            let frames = s.targets.len() / k;
            let mut total = vec![0.0; k];
            for c in 0..clips {
                for j in 0..k {
                    let sum: f64 = (0..cfg.clip_length)
                        .map(|t| s.targets[(c * cfg.clip_length + t) * k + j])
                        .sum();
                    set.clip_targets.push(sum / cfg.clip_length as f64);
                }
            }
            for t in 0..frames {
                for (acc, v) in total.iter_mut().zip(&s.targets[t * k..(t + 1) * k]) {
                    *acc += v;
                }
            }
            set.sample_targets.extend(total.iter().map(|v| v / frames as f64));
            set.labels.push(s.label(k));
            set.fold.push(dataset.folds.subject_fold[s.subject_id as usize]);
            set.subject.push(s.subject_id);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Same features under a different subject-to-fold assignment.
    pub fn with_folds(&self, folds: &FoldAssignment) -> FeatureSet {
        FeatureSet {
            fold: self.subject.iter().map(|s| folds.subject_fold[*s as usize]).collect(),
            ..self.clone()
        }
    }

    pub fn indices_in(&self, folds: &[usize]) -> Vec<usize> {
        (0..self.len()).filter(|&i| folds.contains(&self.fold[i])).collect()
    }

    /// Per-dimension standardisation using statistics of `reference` samples only.
    pub fn standardized(&self, reference: &[usize]) -> Result<FeatureSet> {
        if reference.is_empty() {
            return Err(Error::Input("no samples to standardise against".into()));
        }
        let d = self.dim;
        let rows = reference.len() * self.clips;
        let mut out = self.clone();
        for stream in [&mut out.a, &mut out.b] {
            let mut mean = vec![0.0; d];
            let mut var = vec![0.0; d];
            for &i in reference {
                for c in 0..self.clips {
                    let row = &stream[(i * self.clips + c) * d..][..d];
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / rows as f64);
                }
            }
            for &i in reference {
                for c in 0..self.clips {
                    let row = &stream[(i * self.clips + c) * d..][..d];
                    for j in 0..d {
                        var[j] += (row[j] - mean[j]).powi(2) / rows as f64;
                    }
                }
            }
            let sd: Vec<f64> = var.iter().map(|v| if *v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
            for row in stream.chunks_mut(d) {
                for j in 0..d {
                    row[j] = (row[j] - mean[j]) / sd[j];
                }
            }
        }
        Ok(out)
    }

    /// Stacks the chosen samples into model inputs.
    pub fn batch(&self, indices: &[usize], task: Task, per_clip: bool) -> Result<Batch> {
        let (d, c, k) = (self.dim, self.clips, self.num_targets);
        let rows = indices.len() * c;
        let mut a = Vec::with_capacity(rows * d);
        let mut b = Vec::with_capacity(rows * d);
        let mut targets = Vec::new();
        let mut labels = Vec::new();
        for &i in indices {
            a.extend_from_slice(&self.a[i * c * d..(i + 1) * c * d]);
            b.extend_from_slice(&self.b[i * c * d..(i + 1) * c * d]);
            labels.push(self.labels[i]);
            if per_clip {
                targets.extend_from_slice(&self.clip_targets[i * c * k..(i + 1) * c * k]);
            } else {
                targets.extend_from_slice(&self.sample_targets[i * k..(i + 1) * k]);
            }
        }
        let target_rows = targets.len() / k;
        Ok(Batch {
            a: Tensor::new(&[rows, d], a)?,
            b: Tensor::new(&[rows, d], b)?,
            size: indices.len(),
            targets: match task {
                Task::RegressionCcc => Some(Tensor::new(&[target_rows, k], targets)?),
                Task::BinaryClassification => None,
            },
            labels,
        })
    }
}

pub struct Batch {
    pub a: Tensor,
    pub b: Tensor,
    pub size: usize,
    pub targets: Option<Tensor>,
    pub labels: Vec<usize>,
}
