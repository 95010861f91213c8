//! Parameterized layers: linear, 1-D convolution, pooling, layer norm,
//! feed-forward, multi-head attention and the transformer encoder block.
//!
//! Sequence tensors are laid out as `[batch * len, dim]`, with the batch
//! count passed alongside. A single sequence is simply `batch = 1`.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seed::Seed;
use crate::tensor::{multi_head_attention, AttentionScaling, Tensor};

/// Parameter list with dotted path names.
pub type NamedParams = Vec<(String, Tensor)>;

pub trait Module {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams);

    fn named_parameters(&self) -> NamedParams {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn parameters(&self) -> Vec<Tensor> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(Tensor::numel).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Training flag plus the dropout stream for one forward pass.
pub struct ForwardCtx {
    pub training: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            training: false,
            rng: RefCell::new(Seed(0).rng()),
        }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        ForwardCtx {
            training: true,
            rng: RefCell::new(rng),
        }
    }

    pub fn dropout(&self, x: &Tensor, rate: f64) -> Result<Tensor> {
        x.dropout(rate, self.training, &mut *self.rng.borrow_mut())
    }

    pub fn into_rng(self) -> ChaCha8Rng {
        self.rng.into_inner()
    }
}

fn uniform_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng).to_param()
}

fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).to_param()
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `[in_dim, out_dim]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Linear {
            weight: uniform_init(&[in_dim, out_dim], in_dim, rng),
            bias: zeros_param(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_bias(&self.bias)
    }
}

impl Module for Linear {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        out.push((join(prefix, "bias"), self.bias.clone()));
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    /// `[filters, in_channels, kernel]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, filters: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        Conv1d {
            weight: uniform_init(&[filters, in_channels, kernel], in_channels * kernel, rng),
            bias: zeros_param(&[filters]),
            stride,
        }
    }

    pub fn filters(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// `[length, in_channels] -> [(length - kernel) / stride + 1, filters]`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv1d(&self.weight, &self.bias, self.stride)
    }
}

impl Module for Conv1d {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        out.push((join(prefix, "bias"), self.bias.clone()));
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MaxPool1d {
    pub kernel: usize,
    pub stride: usize,
}

impl MaxPool1d {
    /// Pool whose stride equals its kernel.
    pub fn new(kernel: usize) -> Self {
        MaxPool1d { kernel, stride: kernel }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.maxpool1d(self.kernel, self.stride)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub shift: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Tensor::full(&[dim], 1.0).to_param(),
            shift: zeros_param(&[dim]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gain, &self.shift, self.eps)
    }
}

impl Module for LayerNorm {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((join(prefix, "gain"), self.gain.clone()));
        out.push((join(prefix, "shift"), self.shift.clone()));
    }
}

/// Linear -> ReLU -> Linear.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForward {
            inner: Linear::new(dim, hidden, rng),
            outer: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Tensor, dropout: f64, ctx: &ForwardCtx) -> Result<Tensor> {
        let h = self.inner.forward(x)?.relu();
        let h = ctx.dropout(&h, dropout)?;
        self.outer.forward(&h)
    }
}

impl Module for FeedForward {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        self.inner.collect_params(&join(prefix, "inner"), out);
        self.outer.collect_params(&join(prefix, "outer"), out);
    }
}

/// Multi-head scaled dot-product attention with bias-free projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub num_heads: usize,
    pub model_dim: usize,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub scaling: AttentionScaling,
}

/// Attention output together with the probabilities that produced it.
pub struct Attended {
    /// `[batch * q_len, model_dim]`
    pub output: Tensor,
    /// `[batch, heads, q_len, kv_len]`, row-major.
    pub weights: Vec<f64>,
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        model_dim: usize,
        num_heads: usize,
        scaling: AttentionScaling,
        rng: &mut R,
    ) -> Result<Self> {
        if num_heads == 0 || !model_dim.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "model_dim {model_dim} is not divisible by num_heads {num_heads}"
            )));
        }
        let d = model_dim;
        Ok(MultiHeadAttention {
            num_heads,
            model_dim,
            w_q: uniform_init(&[d, d], d, rng),
            w_k: uniform_init(&[d, d], d, rng),
            w_v: uniform_init(&[d, d], d, rng),
            w_o: uniform_init(&[d, d], d, rng),
            scaling,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Queries from `query_src`, keys and values from `kv_src`.
    pub fn forward(&self, query_src: &Tensor, kv_src: &Tensor, batch: usize) -> Result<Attended> {
        for src in [query_src, kv_src] {
            if src.rank() != 2 || src.shape()[1] != self.model_dim {
                return Err(Error::shape("attention", src.shape(), &[self.model_dim]));
            }
        }
        let q = query_src.matmul(&self.w_q)?;
        let k = kv_src.matmul(&self.w_k)?;
        let v = kv_src.matmul(&self.w_v)?;
        let att = multi_head_attention(&q, &k, &v, batch, self.num_heads, self.scaling)?;
        Ok(Attended {
            output: att.output.matmul(&self.w_o)?,
            weights: att.weights,
            batch,
            q_len: query_src.shape()[0] / batch,
            kv_len: kv_src.shape()[0] / batch,
        })
    }
}

impl Module for MultiHeadAttention {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((join(prefix, "w_q"), self.w_q.clone()));
        out.push((join(prefix, "w_k"), self.w_k.clone()));
        out.push((join(prefix, "w_v"), self.w_v.clone()));
        out.push((join(prefix, "w_o"), self.w_o.clone()));
    }
}

/// Post-norm transformer block: `LN2(z + FFN(z))` with `z = LN1(x + Attn(x, src))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attention: MultiHeadAttention,
    pub feed_forward: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub dropout: f64,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        model_dim: usize,
        num_heads: usize,
        ff_dim: usize,
        scaling: AttentionScaling,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout rate {dropout} outside [0, 1)")));
        }
        Ok(EncoderBlock {
            attention: MultiHeadAttention::new(model_dim, num_heads, scaling, rng)?,
            feed_forward: FeedForward::new(model_dim, ff_dim, rng),
            norm1: LayerNorm::new(model_dim),
            norm2: LayerNorm::new(model_dim),
            dropout,
        })
    }

    /// Self-attention encoder step.
    pub fn forward(&self, x: &Tensor, batch: usize, ctx: &ForwardCtx) -> Result<Tensor> {
        Ok(self.forward_cross_with_weights(x, x, batch, ctx)?.output)
    }

    /// Cross-attention step: queries (and the residual path) from `x`, keys
    /// and values from `source`.
    pub fn forward_cross(&self, x: &Tensor, source: &Tensor, batch: usize, ctx: &ForwardCtx) -> Result<Tensor> {
        Ok(self.forward_cross_with_weights(x, source, batch, ctx)?.output)
    }

    pub fn forward_cross_with_weights(
        &self,
        x: &Tensor,
        source: &Tensor,
        batch: usize,
        ctx: &ForwardCtx,
    ) -> Result<Attended> {
        let att = self.attention.forward(x, source, batch)?;
        let a = ctx.dropout(&att.output, self.dropout)?;
        let z = self.norm1.forward(&x.add(&a)?)?;
        let f = self.feed_forward.forward(&z, self.dropout, ctx)?;
        let f = ctx.dropout(&f, self.dropout)?;
        let y = self.norm2.forward(&z.add(&f)?)?;
        Ok(Attended { output: y, ..att })
    }
}

impl Module for EncoderBlock {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        self.attention.collect_params(&join(prefix, "attention"), out);
        self.feed_forward.collect_params(&join(prefix, "feed_forward"), out);
        self.norm1.collect_params(&join(prefix, "norm1"), out);
        self.norm2.collect_params(&join(prefix, "norm2"), out);
    }
}

/// A stack of encoder blocks applied in order.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
}

impl Encoder {
    pub fn forward(&self, x: &Tensor, batch: usize, ctx: &ForwardCtx) -> Result<Tensor> {
        self.blocks
            .iter()
            .try_fold(x.clone(), |h, block| block.forward(&h, batch, ctx))
    }
}

impl Module for Encoder {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&join(prefix, &i.to_string()), out);
        }
    }
}

/// Sinusoidal position table `[len, dim]`.
pub fn sinusoidal_encoding(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[len, dim], data).expect("len, dim > 0")
}

/// Copies every parameter value from `src` into `dst`; both must list the
/// same shapes in the same order.
pub fn copy_parameters(dst: &impl Module, src: &impl Module) -> Result<()> {
    let d = dst.parameters();
    let s = src.parameters();
    if d.len() != s.len() {
        return Err(Error::Usage(format!(
            "parameter count mismatch: {} vs {}",
            d.len(),
            s.len()
        )));
    }
    for (a, b) in d.iter().zip(&s) {
        if a.shape() != b.shape() {
            return Err(Error::shape("copy_parameters", a.shape(), b.shape()));
        }
        a.assign(&b.data())?;
    }
    Ok(())
}
