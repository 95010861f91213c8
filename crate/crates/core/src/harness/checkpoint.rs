//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `JMTCKPT\0`, `u32` version, `u64` config
//! hash, `u8` model kind, `u64` epochs completed, `u64` optimizer steps,
//! `f64` best metric, `u64` best epoch plus one (0 = none), `u64` epochs since
//! best, then three tensor sections (current parameters, best parameters,
//! optimizer slots) each written as `u32` count followed by
//! `(name, u32 rank, u32 dims..., f64 payload)` entries. The optimizer section
//! is preceded by a `u8` kind (0 none, 1 SGD, 2 Adam) and its `u64` step.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::codec::{self, OffsetReader};
use crate::error::{Error, Result};
use crate::fusion::ModelKind;
use crate::nn::Module;

use super::config::OptimizerKind;
use super::optim::OptimizerState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"JMTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub model: ModelKind,
    pub epochs_completed: usize,
    pub steps: u64,
    pub best_metric: f64,
    pub best_epoch: Option<usize>,
    pub epochs_since_best: usize,
    pub parameters: Vec<NamedArray>,
    pub best_parameters: Vec<NamedArray>,
    pub optimizer: Option<OptimizerState>,
}

pub fn capture(model: &dyn Module) -> Vec<NamedArray> {
    model
        .named_parameters()
        .into_iter()
        .map(|(name, t)| NamedArray {
            name,
            shape: t.shape().to_vec(),
            data: t.to_vec(),
        })
        .collect()
}

/// Writes `arrays` into the model's parameters. Every name and shape is
/// checked before anything is written, so a mismatch leaves the model intact.
pub fn restore(model: &dyn Module, arrays: &[NamedArray]) -> Result<()> {
    let params = model.named_parameters();
    if params.len() != arrays.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} tensors, model has {}",
            arrays.len(),
            params.len()
        )));
    }
    for ((name, t), a) in params.iter().zip(arrays) {
        if *name != a.name || t.shape() != a.shape.as_slice() {
            return Err(Error::Config(format!(
                "checkpoint tensor {} {:?} does not match model tensor {name} {:?}",
                a.name,
                a.shape,
                t.shape()
            )));
        }
    }
    for ((_, t), a) in params.iter().zip(arrays) {
        t.assign(&a.data)?;
    }
    Ok(())
}

fn kind_code(kind: ModelKind) -> u8 {
    ModelKind::ALL.iter().position(|k| *k == kind).expect("listed") as u8
}

fn put_arrays<W: Write>(w: &mut W, arrays: &[NamedArray]) -> Result<()> {
    codec::put_u32(w, arrays.len() as u32)?;
    for a in arrays {
        codec::put_string(w, &a.name)?;
        codec::put_u32(w, a.shape.len() as u32)?;
        for d in &a.shape {
            codec::put_u32(w, *d as u32)?;
        }
        codec::put_f64s(w, &a.data)?;
    }
    Ok(())
}

fn get_arrays<R: Read>(r: &mut OffsetReader<R>, what: &str) -> Result<Vec<NamedArray>> {
    let count = r.u32(what)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(r.corrupt(format!("tensor {name}: implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u32("tensor dim").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = r.f64_array(numel, &name)?;
        out.push(NamedArray { name, shape, data });
    }
    Ok(out)
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        codec::put_u32(&mut w, CHECKPOINT_VERSION)?;
        codec::put_u64(&mut w, self.config_hash)?;
        w.write_all(&[kind_code(self.model)])?;
        codec::put_u64(&mut w, self.epochs_completed as u64)?;
        codec::put_u64(&mut w, self.steps)?;
        codec::put_f64(&mut w, self.best_metric)?;
        codec::put_u64(&mut w, self.best_epoch.map_or(0, |e| e as u64 + 1))?;
        codec::put_u64(&mut w, self.epochs_since_best as u64)?;
        put_arrays(&mut w, &self.parameters)?;
        put_arrays(&mut w, &self.best_parameters)?;
        match &self.optimizer {
            None => w.write_all(&[0])?,
            Some(state) => {
                w.write_all(&[match state.kind {
                    OptimizerKind::Sgd => 1,
                    OptimizerKind::Adam => 2,
                }])?;
                codec::put_u64(&mut w, state.step)?;
                let slots: Vec<NamedArray> = state
                    .slots
                    .iter()
                    .map(|(name, data)| NamedArray {
                        name: name.clone(),
                        shape: vec![data.len()],
                        data: data.clone(),
                    })
                    .collect();
                put_arrays(&mut w, &slots)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = OffsetReader::new(r);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(r.corrupt(format!("unsupported checkpoint version {version}")));
        }
        let config_hash = r.u64("config hash")?;
        let code = r.u8("model kind")? as usize;
        let model = *ModelKind::ALL
            .get(code)
            .ok_or_else(|| r.corrupt(format!("unknown model kind code {code}")))?;
        let epochs_completed = r.u64("epoch")? as usize;
        let steps = r.u64("steps")?;
        let best_metric = r.f64("best metric")?;
        let best_epoch = match r.u64("best epoch")? {
            0 => None,
            e => Some(e as usize - 1),
        };
        let epochs_since_best = r.u64("epochs since best")? as usize;
        let parameters = get_arrays(&mut r, "parameter count")?;
        let best_parameters = get_arrays(&mut r, "best parameter count")?;
        let optimizer = match r.u8("optimizer kind")? {
            0 => None,
            code @ (1 | 2) => {
                let step = r.u64("optimizer step")?;
                let slots = get_arrays(&mut r, "optimizer slot count")?;
                Some(OptimizerState {
                    kind: if code == 1 {
                        OptimizerKind::Sgd
                    } else {
                        OptimizerKind::Adam
                    },
                    step,
                    slots: slots.into_iter().map(|a| (a.name, a.data)).collect(),
                })
            }
            other => return Err(r.corrupt(format!("unknown optimizer code {other}"))),
        };
        if !r.at_end()? {
            return Err(r.corrupt("trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            config_hash,
            model,
            epochs_completed,
            steps,
            best_metric,
            best_epoch,
            epochs_since_best,
            parameters,
            best_parameters,
            optimizer,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        self.write(BufWriter::new(fs::File::create(&tmp)?))?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(fs::File::open(path)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        buf
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{CrossAttentionFusion, FusionConfig};
    use crate::seed::Seed;

    fn model(seed: u64) -> CrossAttentionFusion {
        let cfg = FusionConfig {
            model_dim: 8,
            num_heads: 2,
            ff_dim: 8,
            ..FusionConfig::default()
        };
        CrossAttentionFusion::joint(&cfg, &mut Seed(seed).rng()).unwrap()
    }

    fn sample(m: &CrossAttentionFusion) -> Checkpoint {
        Checkpoint {
            config_hash: 0xdead_beef,
            model: ModelKind::Jmt,
            epochs_completed: 3,
            steps: 42,
            best_metric: 0.5,
            best_epoch: Some(1),
            epochs_since_best: 2,
            parameters: capture(m),
            best_parameters: capture(m),
            optimizer: Some(OptimizerState {
                kind: OptimizerKind::Adam,
                step: 42,
                slots: vec![
                    ("m.x".into(), vec![1.0, f64::MIN_POSITIVE]),
                    ("v.x".into(), vec![-0.0, 3.5]),
                ],
            }),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = model(1);
        let ck = sample(&a);
        let back = Checkpoint::read(&ck.to_bytes()[..]).unwrap();
        assert_eq!(back, ck);
        let b = model(2);
        restore(&b, &back.parameters).unwrap();
        for ((_, x), (_, y)) in a.named_parameters().iter().zip(b.named_parameters().iter()) {
            let bits = |t: &crate::tensor::Tensor| t.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
        }
    }

    #[test]
    fn truncation_is_clean_error() {
        let bytes = sample(&model(1)).to_bytes();
        for cut in [0, 4, 9, 30, bytes.len() / 2, bytes.len() - 1] {
            match Checkpoint::read(&bytes[..cut]) {
                Err(Error::Corrupt { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn version_is_checked() {
        let mut bytes = sample(&model(1)).to_bytes();
        bytes[8] = 99;
        assert!(matches!(
            Checkpoint::read(&bytes[..]),
            Err(Error::Corrupt { offset: 12, .. })
        ));
    }

    #[test]
    fn mismatched_restore_leaves_model_untouched() {
        let a = model(1);
        let mut arrays = capture(&a);
        let b = model(2);
        let before = capture(&b);
        arrays.last_mut().unwrap().shape = vec![99];
        assert!(restore(&b, &arrays).is_err());
        assert_eq!(capture(&b), before);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = sample(&model(3));
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
