//! The training loop with per-epoch validation and early stopping.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::codec;
use crate::data::SyntheticDataset;
use crate::error::{Error, Result};
use crate::fusion::{build_model, FusionModel};
use crate::metrics::{accuracy, ccc_columns, ccc_loss, MetricsRecord};
use crate::nn::ForwardCtx;
use crate::seed::Seed;
use crate::tensor::{no_grad, zero_grads, Tensor};

use super::checkpoint::{capture, restore, Checkpoint, NamedArray};
use super::config::{RunConfig, Task};
use super::experiments::RecordSink;
use super::features::{Batch, FeatureSet};
use super::optim::Optimizer;

/// Raw (unstandardised) features for `cfg`'s dataset and backbone.
pub fn prepare_features(cfg: &RunConfig, dataset: &SyntheticDataset) -> Result<FeatureSet> {
    FeatureSet::extract(
        dataset,
        &cfg.backbone,
        cfg.fusion.model_dim,
        cfg.seed().derive("backbone"),
    )
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub resume: Option<Checkpoint>,
    /// Return after this many completed epochs as if interrupted.
    pub stop_after_epochs: Option<usize>,
    /// Writes `last.ckpt` every epoch and `best.ckpt` on improvement.
    pub checkpoint_dir: Option<&'a Path>,
    pub run_id: Option<String>,
    /// Receives every record as soon as it exists.
    pub on_record: RecordSink<'a>,
}

pub struct TrainOutcome {
    pub run_id: String,
    pub records: Vec<MetricsRecord>,
    /// Best-epoch parameters, no optimizer state.
    pub best: Checkpoint,
    /// Full state after the last completed epoch, suitable for resuming.
    pub last: Checkpoint,
    pub best_epoch: Option<usize>,
    pub best_val_metric: f64,
    pub test: Option<MetricsRecord>,
    pub data_order_hash: String,
    pub epochs_run: usize,
    pub steps: u64,
    pub interrupted: bool,
    /// Model holding the best-epoch parameters.
    pub model: Box<dyn FusionModel>,
}

/// Split evaluation in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub per_target_ccc: Vec<f64>,
    pub accuracy: Option<f64>,
}

impl Evaluation {
    /// Model-selection score: mean CCC for regression, accuracy otherwise.
    pub fn score(&self, task: Task) -> f64 {
        match task {
            Task::RegressionCcc => self.per_target_ccc.iter().sum::<f64>() / self.per_target_ccc.len() as f64,
            Task::BinaryClassification => self.accuracy.unwrap_or(f64::NAN),
        }
    }
}

pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(cfg: &RunConfig, features: &FeatureSet) -> Result<Split> {
    let (v, t) = (cfg.split.val_fold, cfg.split.test_fold);
    let train_folds: Vec<usize> = (0..cfg.dataset.folds).filter(|f| *f != v && *f != t).collect();
    let mut train = features.indices_in(&train_folds);
    if let Some(n) = cfg.train_subset {
        train.truncate(n);
    }
    let split = Split {
        train,
        val: features.indices_in(&[v]),
        test: features.indices_in(&[t]),
    };
    let min = if cfg.task == Task::RegressionCcc && !cfg.fusion.per_clip {
        2
    } else {
        1
    };
    if split.train.len() < min || split.val.len() < min || split.test.len() < min {
        return Err(Error::Input(format!(
            "split sizes train {} / val {} / test {} too small",
            split.train.len(),
            split.val.len(),
            split.test.len()
        )));
    }
    Ok(split)
}

/// Permutation of `0..n` for one epoch; depends on the seed and epoch only.
pub fn epoch_order(n: usize, seed: Seed, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed.derive_index("order", epoch as u64).rng());
    order
}

/// Hash of the sample order every epoch would see; equal across model kinds
/// that share a seed and split.
pub fn data_order_hash(train: &[usize], seed: Seed, epochs: usize) -> String {
    let mut bytes = Vec::new();
    for e in 0..epochs {
        for i in epoch_order(train.len(), seed, e) {
            bytes.extend_from_slice(&(train[i] as u64).to_le_bytes());
        }
    }
    codec::bytes_hash_hex(&bytes)
}

/// Chunks `order` into batches, folding a trailing single sample into the
/// previous batch when a batch of one would be degenerate for the loss.
fn batches(order: &[usize], size: usize, min: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < min) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

fn loss_of(output: &Tensor, batch: &Batch, task: Task) -> Result<Tensor> {
    match task {
        Task::RegressionCcc => ccc_loss(output, batch.targets.as_ref().expect("regression batch has targets")),
        Task::BinaryClassification => output.cross_entropy(&batch.labels),
    }
}

pub fn evaluate(
    model: &dyn FusionModel,
    features: &FeatureSet,
    indices: &[usize],
    cfg: &RunConfig,
) -> Result<Evaluation> {
    let _guard = no_grad();
    let ctx = ForwardCtx::eval();
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    let mut labels = Vec::new();
    let mut ce_total = 0.0;
    for chunk in indices.chunks(64) {
        let batch = features.batch(chunk, cfg.task, cfg.fusion.per_clip)?;
        let out = model.forward(&batch.a, &batch.b, batch.size, &ctx)?;
        if cfg.task == Task::BinaryClassification {
            ce_total += out.cross_entropy(&batch.labels)?.item() * chunk.len() as f64;
        }
        preds.extend(out.to_vec());
        if let Some(t) = &batch.targets {
            targets.extend(t.to_vec());
        }
        labels.extend(batch.labels);
    }
    let k = cfg.fusion.head_output_dim;
    match cfg.task {
        Task::RegressionCcc => {
            let per_target = ccc_columns(&preds, &targets, k)?;
            let mean = per_target.iter().sum::<f64>() / k as f64;
            Ok(Evaluation {
                loss: 1.0 - mean,
                per_target_ccc: per_target,
                accuracy: None,
            })
        }
        Task::BinaryClassification => {
            let logits = Tensor::new(&[labels.len(), k], preds)?;
            Ok(Evaluation {
                loss: ce_total / indices.len() as f64,
                per_target_ccc: Vec::new(),
                accuracy: Some(accuracy(&logits, &labels)?),
            })
        }
    }
}

fn record(run_id: &str, epoch: usize, split: &str, eval: &Evaluation, loss: f64, cfg: &RunConfig) -> MetricsRecord {
    let mut r = MetricsRecord {
        run_id: run_id.to_string(),
        epoch,
        split: split.to_string(),
        valence_ccc: None,
        arousal_ccc: None,
        mean_ccc: None,
        accuracy: eval.accuracy,
        loss,
        seed: cfg.seed,
        config_hash: cfg.hash_hex(),
    };
    r.set_ccc(&eval.per_target_ccc);
    r
}

struct Progress {
    epochs_completed: usize,
    steps: u64,
    best_metric: f64,
    best_epoch: Option<usize>,
    epochs_since_best: usize,
    best_params: Vec<NamedArray>,
}

/// Trains `cfg.model` on the features' training folds, selecting the epoch
/// with the best validation score (earliest on ties) and stopping once
/// `patience` epochs pass without improvement.
pub fn train(cfg: &RunConfig, raw: &FeatureSet, mut opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if raw.dim != cfg.fusion.model_dim {
        return Err(Error::Config(format!(
            "features have dim {} but model_dim is {}",
            raw.dim, cfg.fusion.model_dim
        )));
    }
    let seed = cfg.seed();
    let split = split_indices(cfg, raw)?;
    let features = raw.standardized(&split.train)?;
    let run_id = opts.run_id.clone().unwrap_or_else(|| cfg.run_label());
    let hash = cfg.hash();

    let model = build_model(cfg.model, &cfg.fusion, &mut seed.derive("model").rng())?;
    let params = model.named_parameters();
    let mut optimizer = Optimizer::new(&cfg.optimizer, &params);
    let mut progress = Progress {
        epochs_completed: 0,
        steps: 0,
        best_metric: f64::NEG_INFINITY,
        best_epoch: None,
        epochs_since_best: 0,
        best_params: Vec::new(),
    };
    if let Some(ck) = opts.resume.take() {
        if ck.config_hash != hash || ck.model != cfg.model {
            return Err(Error::Config(format!(
                "checkpoint was written for config {} ({}), not {} ({})",
                codec::hash_hex(ck.config_hash),
                ck.model,
                cfg.hash_hex(),
                cfg.model
            )));
        }
        restore(model.as_ref(), &ck.parameters)?;
        if let Some(state) = ck.optimizer {
            optimizer.load_state(state)?;
        }
        progress = Progress {
            epochs_completed: ck.epochs_completed,
            steps: ck.steps,
            best_metric: ck.best_metric,
            best_epoch: ck.best_epoch,
            epochs_since_best: ck.epochs_since_best,
            best_params: ck.best_parameters,
        };
    }

    let min_batch = if cfg.task == Task::RegressionCcc && !cfg.fusion.per_clip {
        2
    } else {
        1
    };
    let mut records = Vec::new();
    let mut emit = |r: MetricsRecord, records: &mut Vec<MetricsRecord>| -> Result<()> {
        if let Some(f) = opts.on_record.as_mut() {
            f(&r)?;
        }
        records.push(r);
        Ok(())
    };
    let snapshot = |p: &Progress, optimizer: &Optimizer, model: &dyn FusionModel| Checkpoint {
        config_hash: hash,
        model: cfg.model,
        epochs_completed: p.epochs_completed,
        steps: p.steps,
        best_metric: p.best_metric,
        best_epoch: p.best_epoch,
        epochs_since_best: p.epochs_since_best,
        parameters: capture(model),
        best_parameters: p.best_params.clone(),
        optimizer: Some(optimizer.state().clone()),
    };

    let mut interrupted = false;
    let stopped_by_patience = |p: &Progress| p.best_epoch.is_some() && p.epochs_since_best > cfg.patience;
    let steps_exhausted = |p: &Progress| cfg.max_steps.is_some_and(|m| p.steps >= m as u64);
    while progress.epochs_completed < cfg.max_epochs && !stopped_by_patience(&progress) && !steps_exhausted(&progress) {
        if opts.stop_after_epochs.is_some_and(|n| progress.epochs_completed >= n) {
            interrupted = true;
            break;
        }
        let epoch = progress.epochs_completed;
        let ctx = ForwardCtx::train(seed.derive_index("dropout", epoch as u64).rng());
        let order: Vec<usize> = epoch_order(split.train.len(), seed, epoch)
            .into_iter()
            .map(|i| split.train[i])
            .collect();
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in batches(&order, cfg.batch_size, min_batch) {
            if steps_exhausted(&progress) {
                break;
            }
            let batch = features.batch(&chunk, cfg.task, cfg.fusion.per_clip)?;
            zero_grads(params.iter().map(|(_, t)| t));
            let out = model.forward(&batch.a, &batch.b, batch.size, &ctx)?;
            let loss = loss_of(&out, &batch, cfg.task)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: progress.steps as usize,
                    loss: value,
                });
            }
            loss.backward()?;
            optimizer.step(&params)?;
            progress.steps += 1;
            loss_sum += value * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_eval = evaluate(model.as_ref(), &features, &split.train, cfg)?;
        let val = evaluate(model.as_ref(), &features, &split.val, cfg)?;
        if let Some(bad) = [train_eval.loss, val.loss].into_iter().find(|l| !l.is_finite()) {
            // the last update produced non-finite parameters
            return Err(Error::Divergence {
                epoch,
                step: progress.steps as usize,
                loss: bad,
            });
        }
        let train_loss = if seen > 0 {
            loss_sum / seen as f64
        } else {
            train_eval.loss
        };
        emit(
            record(&run_id, epoch, "train", &train_eval, train_loss, cfg),
            &mut records,
        )?;
        emit(record(&run_id, epoch, "val", &val, val.loss, cfg), &mut records)?;

        let score = val.score(cfg.task);
        progress.epochs_completed = epoch + 1;
        if score > progress.best_metric || progress.best_epoch.is_none() {
            progress.best_metric = score;
            progress.best_epoch = Some(epoch);
            progress.epochs_since_best = 0;
            progress.best_params = capture(model.as_ref());
            if let Some(dir) = opts.checkpoint_dir {
                let mut best = snapshot(&progress, &optimizer, model.as_ref());
                best.best_parameters = Vec::new();
                best.save(&dir.join("best.ckpt"))?;
            }
        } else {
            progress.epochs_since_best += 1;
        }
        if let Some(dir) = opts.checkpoint_dir {
            snapshot(&progress, &optimizer, model.as_ref()).save(&dir.join("last.ckpt"))?;
        }
    }

    let last = snapshot(&progress, &optimizer, model.as_ref());
    let mut test = None;
    if !interrupted && !progress.best_params.is_empty() {
        restore(model.as_ref(), &progress.best_params)?;
        let eval = evaluate(model.as_ref(), &features, &split.test, cfg)?;
        let r = record(&run_id, progress.best_epoch.unwrap_or(0), "test", &eval, eval.loss, cfg);
        emit(r.clone(), &mut records)?;
        test = Some(r);
    }
    let best = Checkpoint {
        parameters: progress.best_params.clone(),
        best_parameters: Vec::new(),
        optimizer: None,
        ..last.clone()
    };
    Ok(TrainOutcome {
        run_id,
        records,
        best,
        last,
        best_epoch: progress.best_epoch,
        best_val_metric: progress.best_metric,
        test,
        data_order_hash: data_order_hash(&split.train, seed, cfg.max_epochs),
        epochs_run: progress.epochs_completed,
        steps: progress.steps,
        interrupted,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4, 2);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].len(), 5);
        assert_eq!(batches(&order, 4, 1).len(), 3);
        assert_eq!(batches(&[0], 4, 2), vec![vec![0]]);
    }

    #[test]
    fn epoch_orders_are_permutations_and_vary() {
        let a = epoch_order(20, Seed(1), 0);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_ne!(a, epoch_order(20, Seed(1), 1));
        assert_eq!(a, epoch_order(20, Seed(1), 0));
    }
}
