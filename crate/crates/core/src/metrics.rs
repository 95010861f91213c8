//! Concordance correlation coefficient, its loss, accuracy, and the per-epoch
//! metrics record.
//!
//! All moments are population (1/N) moments.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// CCC value plus a flag for the constant-input conventions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Concordance {
    pub value: f64,
    /// Both inputs were constant: the value is 1 if they were equal, else 0.
    pub degenerate: bool,
}

fn moments(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cov = 0.0;
    for (a, b) in x.iter().zip(y) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cov += (a - mx) * (b - my);
    }
    (mx, my, vx / n, vy / n, cov / n)
}

fn check_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::shape("ccc", &[pred.len()], &[target.len()]));
    }
    if pred.len() < 2 {
        return Err(Error::Input(format!("ccc needs at least 2 points, got {}", pred.len())));
    }
    Ok(())
}

/// `2 cov(x, y) / (var(x) + var(y) + (mean(x) - mean(y))^2)`.
pub fn ccc(pred: &[f64], target: &[f64]) -> Result<Concordance> {
    check_pair(pred, target)?;
    let (mx, my, vx, vy, cov) = moments(pred, target);
    let denom = vx + vy + (mx - my).powi(2);
    if vx == 0.0 && vy == 0.0 {
        let value = if denom == 0.0 { 1.0 } else { 0.0 };
        return Ok(Concordance {
            value,
            degenerate: true,
        });
    }
    Ok(Concordance {
        value: 2.0 * cov / denom,
        degenerate: false,
    })
}

/// Per-column CCC of two `[n, k]` row-major tables.
pub fn ccc_columns(pred: &[f64], target: &[f64], columns: usize) -> Result<Vec<f64>> {
    if pred.len() != target.len() || columns == 0 || !pred.len().is_multiple_of(columns) {
        return Err(Error::shape("ccc_columns", &[pred.len()], &[target.len(), columns]));
    }
    (0..columns)
        .map(|c| {
            let x: Vec<f64> = pred.iter().skip(c).step_by(columns).copied().collect();
            let y: Vec<f64> = target.iter().skip(c).step_by(columns).copied().collect();
            ccc(&x, &y).map(|r| r.value)
        })
        .collect()
}

fn single_ccc_loss(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let mx = x.mean();
    let my = y.mean();
    let dx = x.sub(&mx)?;
    let dy = y.sub(&my)?;
    let vx = dx.square().mean();
    let vy = dy.square().mean();
    let cov = dx.mul(&dy)?.mean();
    let denom = vx.add(&vy)?.add(&mx.sub(&my)?.square())?;
    if denom.item() == 0.0 {
        // identical constants: concordance is 1 by convention
        return Ok(x.sum().scale(0.0));
    }
    Ok(cov.scale(2.0).div(&denom)?.neg().add_scalar(1.0))
}

/// `1 - ccc` on the graph. A `[n, k]` input gives the mean over the k columns.
pub fn ccc_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("ccc_loss", pred.shape(), target.shape()));
    }
    if pred.shape()[0] < 2 {
        return Err(Error::Input(format!(
            "ccc needs at least 2 points, got {}",
            pred.shape()[0]
        )));
    }
    match pred.rank() {
        1 => single_ccc_loss(pred, target),
        2 => {
            let (n, k) = (pred.shape()[0], pred.shape()[1]);
            let mut total: Option<Tensor> = None;
            for c in 0..k {
                let x = pred.slice(1, c, 1)?.reshape(&[n])?;
                let y = target.slice(1, c, 1)?.reshape(&[n])?;
                let l = single_ccc_loss(&x, &y)?;
                total = Some(match total {
                    Some(t) => t.add(&l)?,
                    None => l,
                });
            }
            Ok(total.expect("k >= 1").scale(1.0 / k as f64))
        }
        _ => Err(Error::invalid(
            "ccc_loss",
            format!("expected rank 1 or 2, got {:?}", pred.shape()),
        )),
    }
}

/// Fraction of rows whose argmax equals the label. Ties go to the lower class index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Input("accuracy of an empty batch".into()));
    }
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::shape("accuracy", logits.shape(), &[labels.len()]));
    }
    let c = logits.shape()[1];
    let data = logits.data();
    let hits = data
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub epoch: usize,
    pub split: String,
    pub valence_ccc: Option<f64>,
    pub arousal_ccc: Option<f64>,
    pub mean_ccc: Option<f64>,
    pub accuracy: Option<f64>,
    pub loss: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricsRecord {
    /// Fills the CCC fields from per-target values (one or two targets).
    pub fn set_ccc(&mut self, per_target: &[f64]) {
        self.valence_ccc = per_target.first().copied();
        self.arousal_ccc = per_target.get(1).copied();
        self.mean_ccc = if per_target.is_empty() {
            None
        } else {
            Some(per_target.iter().sum::<f64>() / per_target.len() as f64)
        };
    }
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[MetricsRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub const CSV_HEADER: &str = "run_id,epoch,split,valence_ccc,arousal_ccc,mean_ccc,accuracy,loss,seed,config_hash";

pub fn write_csv<W: Write>(mut out: W, records: &[MetricsRecord]) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.run_id,
            r.epoch,
            r.split,
            opt(r.valence_ccc),
            opt(r.arousal_ccc),
            opt(r.mean_ccc),
            opt(r.accuracy),
            r.loss,
            r.seed,
            r.config_hash
        )?;
    }
    Ok(())
}
