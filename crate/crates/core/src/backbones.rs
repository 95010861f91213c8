//! Modality-specific feature extractors.
//!
//! [`Phys1DCNN`] is the two-conv physiological network whose default shape
//! trace is 2816x1 -> 1406x32 -> 703x32 -> 699x64 -> 349x64 -> 512 -> 2.
//! [`TemporalConvBackbone`] is a small per-clip conv stack used for the
//! synthetic streams. Both feed the fusion model through [`ClipBackbone`].

use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::ModalityStream;
use crate::error::{Error, Result};
use crate::nn::{join, Conv1d, Linear, MaxPool1d, Module, NamedParams};
use crate::tensor::{no_grad, Tensor};

/// Anything that maps one clip `[clip_len, channels]` to a feature row.
pub trait ClipBackbone {
    fn out_dim(&self) -> usize;
    /// Returns a `[1, out_dim]` feature row.
    fn embed_clip(&self, clip: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhysCnnConfig {
    pub input_len: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub kernel: usize,
    pub conv1_stride: usize,
    pub pool: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Default for PhysCnnConfig {
    fn default() -> Self {
        PhysCnnConfig {
            input_len: 2816,
            conv1_filters: 32,
            conv2_filters: 64,
            kernel: 5,
            conv1_stride: 2,
            pool: 2,
            feature_dim: 512,
            num_classes: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhysOutput {
    /// Stop after fc1 + ReLU.
    Features,
    /// Continue through fc2.
    Logits,
}

#[derive(Debug, Clone)]
pub struct Phys1DCNN {
    pub config: PhysCnnConfig,
    pub conv1: Conv1d,
    pub pool1: MaxPool1d,
    pub conv2: Conv1d,
    pub pool2: MaxPool1d,
    pub fc1: Linear,
    pub fc2: Linear,
}

fn valid_len(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    (len >= kernel).then(|| (len - kernel) / stride + 1)
}

impl Phys1DCNN {
    pub fn new<R: Rng + ?Sized>(config: PhysCnnConfig, rng: &mut R) -> Result<Self> {
        let c = config;
        let flat = valid_len(c.input_len, c.kernel, c.conv1_stride)
            .and_then(|l| valid_len(l, c.pool, c.pool))
            .and_then(|l| valid_len(l, c.kernel, 1))
            .and_then(|l| valid_len(l, c.pool, c.pool))
            .ok_or_else(|| Error::Config(format!("input length {} too short for the conv stack", c.input_len)))?
            * c.conv2_filters;
        Ok(Phys1DCNN {
            config,
            conv1: Conv1d::new(1, c.conv1_filters, c.kernel, c.conv1_stride, rng),
            pool1: MaxPool1d::new(c.pool),
            conv2: Conv1d::new(c.conv1_filters, c.conv2_filters, c.kernel, 1, rng),
            pool2: MaxPool1d::new(c.pool),
            fc1: Linear::new(flat, c.feature_dim, rng),
            fc2: Linear::new(c.feature_dim, c.num_classes, rng),
        })
    }

    /// Runs the network and records the shape after every layer.
    pub fn forward_trace(&self, signal: &Tensor, mode: PhysOutput) -> Result<(Tensor, Vec<Vec<usize>>)> {
        let expect = [self.config.input_len, 1];
        let signal = match signal.shape() {
            [n] if *n == expect[0] => signal.reshape(&expect)?,
            s if s == expect => signal.clone(),
            s => return Err(Error::shape("phys_cnn", s, &expect)),
        };
        let mut trace = vec![signal.shape().to_vec()];
        let h = self.conv1.forward(&signal)?.relu();
        trace.push(h.shape().to_vec());
        let h = self.pool1.forward(&h)?;
        trace.push(h.shape().to_vec());
        let h = self.conv2.forward(&h)?.relu();
        trace.push(h.shape().to_vec());
        let h = self.pool2.forward(&h)?;
        trace.push(h.shape().to_vec());
        let h = h.reshape(&[1, h.numel()])?;
        let h = self.fc1.forward(&h)?.relu();
        trace.push(vec![h.numel()]);
        if mode == PhysOutput::Features {
            return Ok((h, trace));
        }
        let out = self.fc2.forward(&h)?;
        trace.push(vec![out.numel()]);
        Ok((out, trace))
    }

    pub fn forward(&self, signal: &Tensor, mode: PhysOutput) -> Result<Tensor> {
        Ok(self.forward_trace(signal, mode)?.0)
    }
}

impl Module for Phys1DCNN {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        self.conv1.collect_params(&join(prefix, "conv1"), out);
        self.conv2.collect_params(&join(prefix, "conv2"), out);
        self.fc1.collect_params(&join(prefix, "fc1"), out);
        self.fc2.collect_params(&join(prefix, "fc2"), out);
    }
}

impl ClipBackbone for Phys1DCNN {
    fn out_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn embed_clip(&self, clip: &Tensor) -> Result<Tensor> {
        self.forward(clip, PhysOutput::Features)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalConvConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub pool: usize,
    pub clip_length: usize,
    pub out_dim: usize,
}

/// Conv1d -> ReLU -> MaxPool -> Linear over one clip.
#[derive(Debug, Clone)]
pub struct TemporalConvBackbone {
    pub config: TemporalConvConfig,
    pub conv: Conv1d,
    pub pool: MaxPool1d,
    pub proj: Linear,
}

impl TemporalConvBackbone {
    pub fn new<R: Rng + ?Sized>(config: TemporalConvConfig, rng: &mut R) -> Result<Self> {
        let c = config;
        let pooled = valid_len(c.clip_length, c.kernel, 1)
            .and_then(|l| valid_len(l, c.pool, c.pool))
            .ok_or_else(|| {
                Error::Config(format!(
                    "clip length {} too short for kernel {} and pool {}",
                    c.clip_length, c.kernel, c.pool
                ))
            })?;
        Ok(TemporalConvBackbone {
            config,
            conv: Conv1d::new(c.in_channels, c.hidden, c.kernel, 1, rng),
            pool: MaxPool1d::new(c.pool),
            proj: Linear::new(pooled * c.hidden, c.out_dim, rng),
        })
    }
}

impl Module for TemporalConvBackbone {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        self.conv.collect_params(&join(prefix, "conv"), out);
        self.proj.collect_params(&join(prefix, "proj"), out);
    }
}

impl ClipBackbone for TemporalConvBackbone {
    fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    fn embed_clip(&self, clip: &Tensor) -> Result<Tensor> {
        let h = self.pool.forward(&self.conv.forward(clip)?.relu())?;
        self.proj.forward(&h.reshape(&[1, h.numel()])?)
    }
}

/// Cuts a stream into consecutive clips (dropping any remainder) and embeds
/// each one with a frozen backbone. Returns `[num_clips, out_dim]`.
pub fn extract_clip_features(
    stream: &ModalityStream,
    backbone: &dyn ClipBackbone,
    clip_length: usize,
) -> Result<Tensor> {
    if clip_length == 0 {
        return Err(Error::Config("clip length must be positive".into()));
    }
    let num_clips = stream.num_frames() / clip_length;
    if num_clips == 0 {
        return Err(Error::Input(format!(
            "stream of {} frames holds no clip of length {clip_length}",
            stream.num_frames()
        )));
    }
    let _guard = no_grad();
    let ch = stream.channels;
    let rows = (0..num_clips)
        .map(|c| {
            let frames = stream.frames[c * clip_length * ch..(c + 1) * clip_length * ch].to_vec();
            backbone.embed_clip(&Tensor::new(&[clip_length, ch], frames)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat(&rows, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramConfig {
    pub sample_rate: f64,
    pub dft_length: usize,
    /// Seconds.
    pub hop: f64,
    /// Seconds.
    pub window: f64,
    /// Optional reduction to this many equal-width frequency bands.
    pub bands: Option<usize>,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        SpectrogramConfig {
            sample_rate: 44_100.0,
            dft_length: 1024,
            hop: 0.010,
            window: 0.020,
            bands: None,
        }
    }
}

impl SpectrogramConfig {
    pub fn window_samples(&self) -> usize {
        (self.window * self.sample_rate).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop * self.sample_rate).round() as usize
    }

    pub fn num_bins(&self) -> usize {
        self.bands.unwrap_or(self.dft_length / 2 + 1)
    }

    /// `floor((n - window) / hop) + 1`, or `None` if `n` is shorter than a window.
    pub fn num_frames(&self, n: usize) -> Option<usize> {
        valid_len(n, self.window_samples(), self.hop_samples())
    }

    fn validate(&self) -> Result<()> {
        let (win, hop) = (self.window_samples(), self.hop_samples());
        if win == 0 || hop == 0 || self.dft_length < 2 {
            return Err(Error::Config(format!("degenerate spectrogram parameters {self:?}")));
        }
        if hop > win {
            return Err(Error::Config(format!(
                "hop ({hop} samples) exceeds window ({win} samples)"
            )));
        }
        if let Some(b) = self.bands {
            if b == 0 || b > self.dft_length / 2 + 1 {
                return Err(Error::Config(format!(
                    "{b} bands do not fit {} bins",
                    self.dft_length / 2 + 1
                )));
            }
        }
        Ok(())
    }
}

const LOG_FLOOR: f64 = 1e-10;

/// Log-power spectrogram with a Hann window, normalized to zero mean and unit
/// variance over the whole spectrogram. Frames shorter than the DFT are
/// zero-padded; longer frames are truncated to the DFT length.
///
/// Output is `[bins, frames]`.
pub fn spectrogram(signal: &[f64], cfg: &SpectrogramConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (win, hop, nfft) = (cfg.window_samples(), cfg.hop_samples(), cfg.dft_length);
    let frames = cfg.num_frames(signal.len()).ok_or_else(|| {
        Error::Input(format!(
            "signal of {} samples is shorter than one {win}-sample window",
            signal.len()
        ))
    })?;
    let hann: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
        .collect();
    let fft: Arc<dyn rustfft::Fft<f64>> = FftPlanner::new().plan_fft_forward(nfft);
    let raw_bins = nfft / 2 + 1;
    let bins = cfg.num_bins();
    let mut out = vec![0.0; bins * frames];
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    let mut power = vec![0.0; raw_bins];
    for f in 0..frames {
        let start = f * hop;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for i in 0..win.min(nfft) {
            buf[i].re = signal[start + i] * hann[i];
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for b in 0..bins {
            let value = match cfg.bands {
                None => power[b],
                Some(n) => {
                    let lo = b * raw_bins / n;
                    let hi = ((b + 1) * raw_bins / n).max(lo + 1);
                    power[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
                }
            };
            out[b * frames + f] = value.max(LOG_FLOOR).ln();
        }
    }
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    out.iter_mut().for_each(|v| *v = (*v - mean) * scale);
    Tensor::new(&[bins, frames], out)
}
