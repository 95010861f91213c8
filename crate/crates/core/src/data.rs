//! Seeded synthetic two-modality corpus.
//!
//! A smooth latent process drives two targets in `[-1, 1]`. Modality A sees
//! one direction of the latent vector and modality B an orthogonal one, so
//! neither stream determines the targets alone. Both streams get Gaussian
//! noise and frame blackouts, optionally correlated across modalities.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{self, OffsetReader};
use crate::error::{Error, Result};
use crate::seed::Seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    A,
    B,
}

impl Modality {
    pub fn index(self) -> usize {
        match self {
            Modality::A => 0,
            Modality::B => 1,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Modality::A => "A",
            Modality::B => "B",
        }
    }
}

/// Frames of one modality for one sequence, `[frames, channels]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityStream {
    pub modality: Modality,
    pub channels: usize,
    pub frames: Vec<f64>,
    pub subject_id: u32,
    pub sequence_id: u32,
}

impl ModalityStream {
    pub fn num_frames(&self) -> usize {
        self.frames.len().checked_div(self.channels).unwrap_or(0)
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.channels..(t + 1) * self.channels]
    }

    pub fn is_blacked_out(&self, t: usize) -> bool {
        self.frame(t).iter().all(|v| *v == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentEmotionProcess {
    pub length: usize,
    /// AR(1) coefficient in (0, 1); lag-1 autocorrelation grows with it.
    pub smoothness: f64,
    pub num_targets: usize,
    pub seed: Seed,
}

const LATENT_SD: f64 = 0.5;

/// Stationary AR(1) series per target, clamped to `[-1, 1]`. Returns `[length, num_targets]`.
pub fn generate_sequence(process: &LatentEmotionProcess) -> Result<Tensor> {
    let LatentEmotionProcess {
        length,
        smoothness,
        num_targets,
        seed,
    } = *process;
    if length == 0 || num_targets == 0 {
        return Err(Error::Config(
            "latent process needs length >= 1 and at least one target".into(),
        ));
    }
    if !(smoothness > 0.0 && smoothness < 1.0) {
        return Err(Error::Config(format!("smoothness {smoothness} outside (0, 1)")));
    }
    let mut rng = seed.rng();
    let innovation = (1.0 - smoothness * smoothness).sqrt() * LATENT_SD;
    let mut out = vec![0.0; length * num_targets];
    for k in 0..num_targets {
        let first: f64 = StandardNormal.sample(&mut rng);
        let mut z = LATENT_SD * first;
        for t in 0..length {
            if t > 0 {
                let eps: f64 = StandardNormal.sample(&mut rng);
                z = smoothness * z + innovation * eps;
            }
            out[t * num_targets + k] = z.clamp(-1.0, 1.0);
        }
    }
    Tensor::new(&[length, num_targets], out)
}

/// Per-modality observation model.
///
/// The scalar drive is `s = direction . z + interaction * z0 * z1`, and channel
/// `c` shows `gains[c] * s + curvature[c] * tanh(2 s) + offsets[c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixing {
    pub direction: Vec<f64>,
    pub interaction: f64,
    pub gains: Vec<f64>,
    pub curvature: Vec<f64>,
    pub offsets: Vec<f64>,
}

impl Mixing {
    /// A looks along (1, 1)/sqrt(2), B along (1, -1)/sqrt(2); a single target is
    /// seen by both. The interaction term enters with opposite signs.
    pub fn standard<R: Rng + ?Sized>(
        modality: Modality,
        channels: usize,
        num_targets: usize,
        nonlinearity: f64,
        interaction: f64,
        rng: &mut R,
    ) -> Self {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let sign = if modality == Modality::A { 1.0 } else { -1.0 };
        let mut direction = vec![0.0; num_targets];
        match num_targets {
            1 => direction[0] = 1.0,
            _ => {
                direction[0] = h;
                direction[1] = sign * h;
            }
        }
        let gains = (0..channels)
            .map(|_| {
                let g: f64 = rng.random_range(0.5..1.5);
                if rng.random::<bool>() {
                    g
                } else {
                    -g
                }
            })
            .collect();
        let curvature = (0..channels)
            .map(|_| nonlinearity * rng.random_range(-1.0..1.0))
            .collect();
        let offsets = (0..channels).map(|_| rng.random_range(-0.2..0.2)).collect();
        Mixing {
            direction,
            interaction: if num_targets >= 2 { sign * interaction } else { 0.0 },
            gains,
            curvature,
            offsets,
        }
    }

    pub fn channels(&self) -> usize {
        self.gains.len()
    }

    fn drive(&self, z: &[f64]) -> f64 {
        let linear: f64 = self.direction.iter().zip(z).map(|(d, z)| d * z).sum();
        let cross = if z.len() >= 2 { z[0] * z[1] } else { 0.0 };
        linear + self.interaction * cross
    }

    fn with_gain_jitter<R: Rng + ?Sized>(&self, jitter: f64, rng: &mut R) -> Mixing {
        let mut m = self.clone();
        if jitter > 0.0 {
            let n = Normal::new(0.0, jitter).expect("jitter > 0");
            m.gains.iter_mut().for_each(|g| *g *= 1.0 + n.sample(rng));
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Additive Gaussian noise per modality (A, B).
    pub gaussian_sigma: [f64; 2],
    /// Independent blackout probability per modality (A, B).
    pub blackout_prob: [f64; 2],
    /// Probability that both modalities black out together.
    pub correlated_blackout_prob: f64,
    /// Frames per blackout decision; 1 blacks out single frames.
    pub burst: usize,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            gaussian_sigma: [0.0; 2],
            blackout_prob: [0.0; 2],
            correlated_blackout_prob: 0.0,
            burst: 1,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.blackout_prob[0],
            self.blackout_prob[1],
            self.correlated_blackout_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!(
                "blackout probabilities {probs:?} outside [0, 1]"
            )));
        }
        if self.gaussian_sigma.iter().any(|s| *s < 0.0 || !s.is_finite()) {
            return Err(Error::Config(format!("invalid noise sigma {:?}", self.gaussian_sigma)));
        }
        if self.burst == 0 {
            return Err(Error::Config("blackout burst must be at least one frame".into()));
        }
        Ok(())
    }

    fn blackout_mask(&self, frames: usize, modality: Modality) -> Vec<bool> {
        let mut own = Seed(self.seed).derive(&format!("blackout-{}", modality.label())).rng();
        let mut shared = Seed(self.seed).derive("blackout-shared").rng();
        let p = self.blackout_prob[modality.index()];
        let mut mask = vec![false; frames];
        for start in (0..frames).step_by(self.burst) {
            let alone = own.random::<f64>() < p;
            let together = shared.random::<f64>() < self.correlated_blackout_prob;
            if alone || together {
                mask[start..(start + self.burst).min(frames)].fill(true);
            }
        }
        mask
    }
}

/// Renders one modality's frames from a `[frames, targets]` latent series.
pub fn render_modality(
    targets: &Tensor,
    modality: Modality,
    mixing: &Mixing,
    noise: &NoiseSpec,
    subject_id: u32,
    sequence_id: u32,
) -> Result<ModalityStream> {
    noise.validate()?;
    if targets.rank() != 2 || targets.shape()[1] != mixing.direction.len() {
        return Err(Error::shape(
            "render_modality",
            targets.shape(),
            &[mixing.direction.len()],
        ));
    }
    let (len, k) = (targets.shape()[0], targets.shape()[1]);
    let ch = mixing.channels();
    let sigma = noise.gaussian_sigma[modality.index()];
    let mut rng = Seed(noise.seed).derive(&format!("gauss-{}", modality.label())).rng();
    let mask = noise.blackout_mask(len, modality);
    let z = targets.data();
    let mut frames = vec![0.0; len * ch];
    for t in 0..len {
        let s = mixing.drive(&z[t * k..(t + 1) * k]);
        for c in 0..ch {
            let eps: f64 = StandardNormal.sample(&mut rng);
            let clean = mixing.gains[c] * s + mixing.curvature[c] * (2.0 * s).tanh() + mixing.offsets[c];
            // noise draws happen regardless of the mask so blackouts never shift the stream
            if !mask[t] {
                frames[t * ch + c] = clean + sigma * eps;
            }
        }
    }
    Ok(ModalityStream {
        modality,
        channels: ch,
        frames,
        subject_id,
        sequence_id,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub num_subjects: usize,
    pub sequences_per_subject: usize,
    pub clips_per_sequence: usize,
    pub clip_length: usize,
    pub channels: [usize; 2],
    pub num_targets: usize,
    pub smoothness: f64,
    pub nonlinearity: f64,
    pub interaction: f64,
    /// Relative per-subject jitter on channel gains.
    pub subject_jitter: f64,
    pub noise: NoiseSpec,
    pub folds: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_subjects: 10,
            sequences_per_subject: 12,
            clips_per_sequence: 8,
            clip_length: 8,
            channels: [6, 6],
            num_targets: 2,
            smoothness: 0.9,
            nonlinearity: 0.5,
            interaction: 0.0,
            subject_jitter: 0.1,
            noise: NoiseSpec {
                gaussian_sigma: [0.1, 0.1],
                ..NoiseSpec::default()
            },
            folds: 5,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn frames_per_sequence(&self) -> usize {
        self.clips_per_sequence * self.clip_length
    }

    pub fn hash(&self) -> u64 {
        codec::config_hash(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if self.num_subjects == 0 || self.sequences_per_subject == 0 {
            return Err(Error::Config("dataset needs at least one subject and sequence".into()));
        }
        if self.clips_per_sequence == 0 || self.clip_length == 0 {
            return Err(Error::Config("clip count and clip length must be positive".into()));
        }
        if self.channels.contains(&0) || !(1..=2).contains(&self.num_targets) {
            return Err(Error::Config("channels must be positive and targets 1 or 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub subject_id: u32,
    pub sequence_id: u32,
    pub a: ModalityStream,
    pub b: ModalityStream,
    /// `[frames, num_targets]` row-major.
    pub targets: Vec<f64>,
}

impl Sample {
    pub fn stream(&self, m: Modality) -> &ModalityStream {
        match m {
            Modality::A => &self.a,
            Modality::B => &self.b,
        }
    }

    /// Binary label: 1 if the first target's mean over the sequence exceeds 0.
    pub fn label(&self, num_targets: usize) -> usize {
        let first: Vec<f64> = self.targets.iter().step_by(num_targets).copied().collect();
        usize::from(first.iter().sum::<f64>() / first.len() as f64 > 0.0)
    }
}

/// Subject-disjoint fold assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    /// Fold index for each subject id.
    pub subject_fold: Vec<usize>,
}

impl FoldAssignment {
    pub fn subjects_in(&self, fold: usize) -> Vec<usize> {
        (0..self.subject_fold.len())
            .filter(|&s| self.subject_fold[s] == fold)
            .collect()
    }
}

/// Shuffles subjects with `seed` and deals them round-robin into `k` folds.
pub fn make_folds(num_subjects: usize, k: usize, seed: Seed) -> Result<FoldAssignment> {
    if k < 2 || k > num_subjects {
        return Err(Error::Config(format!(
            "cannot make {k} folds from {num_subjects} subjects"
        )));
    }
    let mut order: Vec<usize> = (0..num_subjects).collect();
    order.shuffle(&mut seed.rng());
    let mut subject_fold = vec![0; num_subjects];
    for (i, s) in order.into_iter().enumerate() {
        subject_fold[s] = i % k;
    }
    Ok(FoldAssignment { k, subject_fold })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: DatasetConfig,
    pub samples: Vec<Sample>,
    pub folds: FoldAssignment,
}

impl SyntheticDataset {
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        config.validate()?;
        let root = Seed(config.seed);
        let base: Vec<Mixing> = [Modality::A, Modality::B]
            .iter()
            .map(|&m| {
                let mut rng = root.derive(&format!("mixing-{}", m.label())).rng();
                Mixing::standard(
                    m,
                    config.channels[m.index()],
                    config.num_targets,
                    config.nonlinearity,
                    config.interaction,
                    &mut rng,
                )
            })
            .collect();
        let frames = config.frames_per_sequence();
        let mut samples = Vec::with_capacity(config.num_subjects * config.sequences_per_subject);
        for subject in 0..config.num_subjects {
            let mut jitter_rng = root.derive_index("subject", subject as u64).rng();
            let mixing: Vec<Mixing> = base
                .iter()
                .map(|m| m.with_gain_jitter(config.subject_jitter, &mut jitter_rng))
                .collect();
            for seq in 0..config.sequences_per_subject {
                let index = (subject * config.sequences_per_subject + seq) as u64;
                let latent = generate_sequence(&LatentEmotionProcess {
                    length: frames,
                    smoothness: config.smoothness,
                    num_targets: config.num_targets,
                    seed: root.derive_index("latent", index),
                })?;
                let noise = NoiseSpec {
                    seed: Seed(config.noise.seed)
                        .derive_index("sample", index ^ config.seed.rotate_left(17))
                        .0,
                    ..config.noise
                };
                let (sid, qid) = (subject as u32, seq as u32);
                samples.push(Sample {
                    subject_id: sid,
                    sequence_id: qid,
                    a: render_modality(&latent, Modality::A, &mixing[0], &noise, sid, qid)?,
                    b: render_modality(&latent, Modality::B, &mixing[1], &noise, sid, qid)?,
                    targets: latent.to_vec(),
                });
            }
        }
        let folds = make_folds(config.num_subjects, config.folds, root.derive("folds"))?;
        Ok(SyntheticDataset {
            config: config.clone(),
            samples,
            folds,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices whose subject falls in any of `folds`.
    pub fn indices_in_folds(&self, folds: &[usize]) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| folds.contains(&self.folds.subject_fold[s.subject_id as usize]))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn hash(&self) -> u64 {
        self.config.hash()
    }

    /// Writes the flat little-endian container described in the README.
    pub fn dump<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        codec::put_u32(&mut w, DATASET_VERSION)?;
        codec::put_u64(&mut w, self.hash())?;
        codec::put_string(&mut w, &serde_json::to_string(&self.config)?)?;
        codec::put_u32(&mut w, self.folds.k as u32)?;
        codec::put_u32(&mut w, self.folds.subject_fold.len() as u32)?;
        for f in &self.folds.subject_fold {
            codec::put_u32(&mut w, *f as u32)?;
        }
        codec::put_u32(&mut w, self.samples.len() as u32)?;
        for s in &self.samples {
            codec::put_u32(&mut w, s.subject_id)?;
            codec::put_u32(&mut w, s.sequence_id)?;
            for (rows, cols, data) in [
                (s.a.num_frames(), s.a.channels, &s.a.frames),
                (s.b.num_frames(), s.b.channels, &s.b.frames),
                (
                    s.targets.len() / self.config.num_targets,
                    self.config.num_targets,
                    &s.targets,
                ),
            ] {
                codec::put_u32(&mut w, rows as u32)?;
                codec::put_u32(&mut w, cols as u32)?;
                codec::put_f64s(&mut w, data)?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let mut r = OffsetReader::new(r);
        r.expect_magic(DATASET_MAGIC)?;
        let version = r.u32("version")?;
        if version != DATASET_VERSION {
            return Err(r.corrupt(format!("unsupported dataset version {version}")));
        }
        let hash = r.u64("config hash")?;
        let json = r.string("config")?;
        let config: DatasetConfig = serde_json::from_str(&json).map_err(|e| r.corrupt(format!("config json: {e}")))?;
        if config.hash() != hash {
            return Err(r.corrupt("config hash does not match header"));
        }
        let k = r.u32("fold count")? as usize;
        let subjects = r.u32("subject count")? as usize;
        if subjects != config.num_subjects {
            return Err(r.corrupt(format!("{subjects} fold entries for {} subjects", config.num_subjects)));
        }
        let subject_fold = (0..subjects)
            .map(|_| r.u32("subject fold").map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = r.u32("sample count")? as usize;
        let frames = config.frames_per_sequence();
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let subject_id = r.u32("subject id")?;
            let sequence_id = r.u32("sequence id")?;
            let mut arrays = Vec::with_capacity(3);
            for (what, cols) in [
                ("modality A", config.channels[0]),
                ("modality B", config.channels[1]),
                ("targets", config.num_targets),
            ] {
                let rows = r.u32(what)? as usize;
                let c = r.u32(what)? as usize;
                if rows != frames || c != cols {
                    return Err(r.corrupt(format!("{what}: shape {rows}x{c}, expected {frames}x{cols}")));
                }
                arrays.push(r.f64_array(rows * c, what)?);
            }
            let targets = arrays.pop().expect("three arrays");
            let b = arrays.pop().expect("three arrays");
            let a = arrays.pop().expect("three arrays");
            let stream = |modality: Modality, frames: Vec<f64>| ModalityStream {
                modality,
                channels: config.channels[modality.index()],
                frames,
                subject_id,
                sequence_id,
            };
            samples.push(Sample {
                subject_id,
                sequence_id,
                a: stream(Modality::A, a),
                b: stream(Modality::B, b),
                targets,
            });
        }
        if !r.at_end()? {
            return Err(r.corrupt("trailing bytes after last sample"));
        }
        Ok(SyntheticDataset {
            config,
            samples,
            folds: FoldAssignment { k, subject_fold },
        })
    }
}

pub const DATASET_MAGIC: &[u8; 8] = b"JMTDSET\0";
pub const DATASET_VERSION: u32 = 1;
