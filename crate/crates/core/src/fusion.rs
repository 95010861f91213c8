//! Cross-attention fusion of two clip-feature streams.
//!
//! [`CrossAttentionFusion::joint`] builds the three-branch model: streams A and
//! B plus a joint branch `J = joint_fc([F_B ; F_A])`, six cross-attention blocks
//! over ordered branch pairs, a self-attention aggregator over the six pooled
//! block outputs and a linear head. [`CrossAttentionFusion::vanilla`] drops the
//! joint branch and keeps the two A/B blocks. [`ConcatBaseline`] and
//! [`UnimodalModel`] are the attention-free and single-stream references.
//!
//! Inputs are `[batch * clips, model_dim]` per modality. Pooled models return
//! `[batch, head_output_dim]`; with `per_clip` set the head runs on every clip
//! and the result is `[batch * clips, head_output_dim]`.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::nn::{join, sinusoidal_encoding, Encoder, EncoderBlock, ForwardCtx, Linear, Module, NamedParams};
use crate::tensor::{AttentionScaling, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Jmt,
    Vanilla,
    Concat,
    UnimodalA,
    UnimodalB,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::UnimodalA,
        ModelKind::UnimodalB,
        ModelKind::Concat,
        ModelKind::Vanilla,
        ModelKind::Jmt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Jmt => "jmt",
            ModelKind::Vanilla => "vanilla",
            ModelKind::Concat => "concat",
            ModelKind::UnimodalA => "unimodal_a",
            ModelKind::UnimodalB => "unimodal_b",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind {s:?}")))
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Stack the block outputs as a sequence and run an encoder block over it.
    #[default]
    SelfAttentionStack,
    /// Flatten the block outputs straight into the head.
    ConcatFc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub encoder_depth: usize,
    pub aggregation_mode: AggregationMode,
    pub scaling_variant: AttentionScaling,
    pub dropout_rate: f64,
    pub head_output_dim: usize,
    pub positional_encoding: bool,
    pub per_clip: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            model_dim: 512,
            num_heads: 8,
            ff_dim: 1024,
            encoder_depth: 1,
            aggregation_mode: AggregationMode::SelfAttentionStack,
            scaling_variant: AttentionScaling::SqrtDk,
            dropout_rate: 0.1,
            head_output_dim: 2,
            positional_encoding: false,
            per_clip: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.ff_dim == 0 || self.head_output_dim == 0 {
            return Err(Error::Config("ff_dim and head_output_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    fn block<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<EncoderBlock> {
        EncoderBlock::new(
            self.model_dim,
            self.num_heads,
            self.ff_dim,
            self.scaling_variant,
            self.dropout_rate,
            rng,
        )
    }

    fn encoder<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Encoder> {
        let blocks = (0..self.encoder_depth)
            .map(|_| self.block(rng))
            .collect::<Result<_>>()?;
        Ok(Encoder { blocks })
    }
}

/// Every fusion variant maps two aligned feature streams to predictions.
pub trait FusionModel: Module {
    fn kind(&self) -> ModelKind;

    fn config(&self) -> &FusionConfig;

    fn forward(&self, fa: &Tensor, fb: &Tensor, batch: usize, ctx: &ForwardCtx) -> Result<Tensor>;
}

pub fn build_model<R: Rng + ?Sized>(kind: ModelKind, cfg: &FusionConfig, rng: &mut R) -> Result<Box<dyn FusionModel>> {
    Ok(match kind {
        ModelKind::Jmt => Box::new(CrossAttentionFusion::joint(cfg, rng)?),
        ModelKind::Vanilla => Box::new(CrossAttentionFusion::vanilla(cfg, rng)?),
        ModelKind::Concat => Box::new(ConcatBaseline::new(cfg, rng)?),
        ModelKind::UnimodalA => Box::new(UnimodalModel::new(Modality::A, cfg, rng)?),
        ModelKind::UnimodalB => Box::new(UnimodalModel::new(Modality::B, cfg, rng)?),
    })
}

/// Checks alignment and returns the clip count per sample.
fn clips_per_sample(fa: &Tensor, fb: &Tensor, batch: usize, dim: usize) -> Result<usize> {
    for f in [fa, fb] {
        if f.rank() != 2 || f.shape()[1] != dim {
            return Err(Error::shape("fusion input", f.shape(), &[dim]));
        }
    }
    if fa.shape()[0] != fb.shape()[0] {
        return Err(Error::Alignment(fa.shape()[0], fb.shape()[0]));
    }
    let rows = fa.shape()[0];
    if batch == 0 || rows == 0 || !rows.is_multiple_of(batch) {
        return Err(Error::invalid(
            "fusion input",
            format!("{rows} rows do not split into {batch} samples"),
        ));
    }
    Ok(rows / batch)
}

fn with_positions(x: &Tensor, batch: usize, clips: usize, enabled: bool) -> Result<Tensor> {
    if !enabled {
        return Ok(x.clone());
    }
    let table = sinusoidal_encoding(clips, x.shape()[1]);
    let tiled = Tensor::concat(&vec![table; batch], 0)?;
    x.add(&tiled)
}

/// Mean over the clips of each sample, or identity in per-clip mode.
fn pool(x: &Tensor, batch: usize, clips: usize, per_clip: bool) -> Result<Tensor> {
    if per_clip {
        return Ok(x.clone());
    }
    let d = x.shape()[1];
    x.reshape(&[batch, clips, d])?.mean_axis(1)
}

/// `J = joint_fc([F_B ; F_A])`, applied clip by clip.
pub fn joint_representation(fa: &Tensor, fb: &Tensor, joint_fc: &Linear) -> Result<Tensor> {
    if fa.rank() != 2 || fb.rank() != 2 {
        return Err(Error::shape("joint_representation", fa.shape(), fb.shape()));
    }
    if fa.shape()[0] != fb.shape()[0] {
        return Err(Error::Alignment(fa.shape()[0], fb.shape()[0]));
    }
    joint_fc.forward(&Tensor::concat(&[fb.clone(), fa.clone()], 1)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    A,
    B,
    J,
}

impl Branch {
    fn index(self) -> usize {
        match self {
            Branch::A => 0,
            Branch::B => 1,
            Branch::J => 2,
        }
    }

    fn lower(self) -> &'static str {
        match self {
            Branch::A => "a",
            Branch::B => "b",
            Branch::J => "j",
        }
    }
}

/// `(query, key/value)` branch pairs in stacking order.
pub const JOINT_PAIRS: [(Branch, Branch); 6] = [
    (Branch::A, Branch::B),
    (Branch::A, Branch::J),
    (Branch::B, Branch::A),
    (Branch::B, Branch::J),
    (Branch::J, Branch::A),
    (Branch::J, Branch::B),
];

pub const VANILLA_PAIRS: [(Branch, Branch); 2] = [(Branch::A, Branch::B), (Branch::B, Branch::A)];

pub fn pair_label((q, kv): (Branch, Branch)) -> String {
    format!("{q:?}<-{kv:?}")
}

#[derive(Debug, Clone)]
pub struct CrossAttentionFusion {
    pub config: FusionConfig,
    pub joint_fc: Option<Linear>,
    /// Branch encoders in `A, B, J` order.
    pub encoders: Vec<Encoder>,
    pub pairs: Vec<(Branch, Branch)>,
    pub cross: Vec<EncoderBlock>,
    pub aggregator: Option<EncoderBlock>,
    pub head: Linear,
}

/// Intermediate tensors of one fusion forward pass.
pub struct FusionTrace {
    pub joint: Option<Tensor>,
    pub encoded: Vec<Tensor>,
    pub cross: Vec<Tensor>,
    pub pooled: Vec<Tensor>,
    /// `[groups * blocks, model_dim]`
    pub stacked: Tensor,
    /// `[groups, blocks * model_dim]`
    pub flattened: Tensor,
    pub output: Tensor,
    /// Aggregator self-attention `[groups, heads, blocks, blocks]`.
    pub aggregator_weights: Option<Vec<f64>>,
    pub groups: usize,
}

impl CrossAttentionFusion {
    pub fn joint<R: Rng + ?Sized>(cfg: &FusionConfig, rng: &mut R) -> Result<Self> {
        Self::build(cfg, true, &JOINT_PAIRS, rng)
    }

    pub fn vanilla<R: Rng + ?Sized>(cfg: &FusionConfig, rng: &mut R) -> Result<Self> {
        Self::build(cfg, false, &VANILLA_PAIRS, rng)
    }

    fn build<R: Rng + ?Sized>(
        cfg: &FusionConfig,
        with_joint: bool,
        pairs: &[(Branch, Branch)],
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let joint_fc = with_joint.then(|| Linear::new(2 * d, d, rng));
        let branches = if with_joint { 3 } else { 2 };
        let encoders = (0..branches).map(|_| cfg.encoder(rng)).collect::<Result<_>>()?;
        let cross = pairs.iter().map(|_| cfg.block(rng)).collect::<Result<_>>()?;
        let aggregator = match cfg.aggregation_mode {
            AggregationMode::SelfAttentionStack => Some(cfg.block(rng)?),
            AggregationMode::ConcatFc => None,
        };
        let head = Linear::new(pairs.len() * d, cfg.head_output_dim, rng);
        Ok(CrossAttentionFusion {
            config: cfg.clone(),
            joint_fc,
            encoders,
            pairs: pairs.to_vec(),
            cross,
            aggregator,
            head,
        })
    }

    pub fn block_labels(&self) -> Vec<String> {
        self.pairs.iter().map(|p| pair_label(*p)).collect()
    }

    pub fn forward_trace(&self, fa: &Tensor, fb: &Tensor, batch: usize, ctx: &ForwardCtx) -> Result<FusionTrace> {
        let cfg = &self.config;
        let d = cfg.model_dim;
        let clips = clips_per_sample(fa, fb, batch, d)?;
        let fa = with_positions(fa, batch, clips, cfg.positional_encoding)?;
        let fb = with_positions(fb, batch, clips, cfg.positional_encoding)?;
        let joint = match &self.joint_fc {
            Some(fc) => Some(joint_representation(&fa, &fb, fc)?),
            None => None,
        };
        let mut inputs = vec![fa, fb];
        inputs.extend(joint.clone());
        let encoded = self
            .encoders
            .iter()
            .zip(&inputs)
            .map(|(enc, x)| enc.forward(x, batch, ctx))
            .collect::<Result<Vec<_>>>()?;
        let cross = self
            .pairs
            .iter()
            .zip(&self.cross)
            .map(|((q, kv), block)| block.forward_cross(&encoded[q.index()], &encoded[kv.index()], batch, ctx))
            .collect::<Result<Vec<_>>>()?;
        let pooled = cross
            .iter()
            .map(|c| pool(c, batch, clips, cfg.per_clip))
            .collect::<Result<Vec<_>>>()?;
        let groups = pooled[0].shape()[0];
        let m = self.pairs.len();
        let flat_in = Tensor::concat(&pooled, 1)?;
        let stacked = flat_in.reshape(&[groups * m, d])?;
        let (flattened, aggregator_weights) = match &self.aggregator {
            Some(agg) => {
                let att = agg.forward_cross_with_weights(&stacked, &stacked, groups, ctx)?;
                (att.output.reshape(&[groups, m * d])?, Some(att.weights))
            }
            None => (flat_in, None),
        };
        let output = self.head.forward(&flattened)?;
        Ok(FusionTrace {
            joint,
            encoded,
            cross,
            pooled,
            stacked,
            flattened,
            output,
            aggregator_weights,
            groups,
        })
    }
}

impl FusionModel for CrossAttentionFusion {
    fn kind(&self) -> ModelKind {
        if self.joint_fc.is_some() {
            ModelKind::Jmt
        } else {
            ModelKind::Vanilla
        }
    }

    fn config(&self) -> &FusionConfig {
        &self.config
    }

    fn forward(&self, fa: &Tensor, fb: &Tensor, batch: usize, ctx: &ForwardCtx) -> Result<Tensor> {
        Ok(self.forward_trace(fa, fb, batch, ctx)?.output)
    }
}

impl Module for CrossAttentionFusion {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        if let Some(fc) = &self.joint_fc {
            fc.collect_params(&join(prefix, "joint_fc"), out);
        }
        for (enc, b) in self.encoders.iter().zip([Branch::A, Branch::B, Branch::J]) {
            enc.collect_params(&join(prefix, &format!("encoder_{}", b.lower())), out);
        }
        for ((q, kv), block) in self.pairs.iter().zip(&self.cross) {
            block.collect_params(&join(prefix, &format!("cross_{}_from_{}", q.lower(), kv.lower())), out);
        }
        if let Some(agg) = &self.aggregator {
            agg.collect_params(&join(prefix, "aggregator"), out);
        }
        self.head.collect_params(&join(prefix, "head"), out);
    }
}

/// Aggregator attention averaged over samples and heads.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionReport {
    pub blocks: Vec<String>,
    /// `per_query[i][j]`: mass query block `i` puts on block `j`; rows sum to 1.
    pub per_query: Vec<Vec<f64>>,
    /// Mean mass received by each block over all queries; sums to 1.
    pub column_mass: Vec<f64>,
}

pub fn attention_weights_report(
    model: &CrossAttentionFusion,
    fa: &Tensor,
    fb: &Tensor,
    batch: usize,
) -> Result<AttentionReport> {
    let trace = model.forward_trace(fa, fb, batch, &ForwardCtx::eval())?;
    let weights = trace
        .aggregator_weights
        .ok_or_else(|| Error::Config("attention report needs the self-attention aggregator".into()))?;
    let m = model.pairs.len();
    let slabs = weights.len() / (m * m);
    let mut per_query = vec![vec![0.0; m]; m];
    for slab in weights.chunks(m * m) {
        for i in 0..m {
            for j in 0..m {
                per_query[i][j] += slab[i * m + j] / slabs as f64;
            }
        }
    }
    let column_mass = (0..m)
        .map(|j| per_query.iter().map(|row| row[j]).sum::<f64>() / m as f64)
        .collect();
    Ok(AttentionReport {
        blocks: model.block_labels(),
        per_query,
        column_mass,
    })
}

/// Per-clip `[F_B ; F_A]` through `Linear -> ReLU`, pooled, then a linear head.
#[derive(Debug, Clone)]
pub struct ConcatBaseline {
    pub config: FusionConfig,
    pub fc: Linear,
    pub head: Linear,
}

impl ConcatBaseline {
    pub fn new<R: Rng + ?Sized>(cfg: &FusionConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        Ok(ConcatBaseline {
            config: cfg.clone(),
            fc: Linear::new(2 * d, d, rng),
            head: Linear::new(d, cfg.head_output_dim, rng),
        })
    }
}

impl FusionModel for ConcatBaseline {
    fn kind(&self) -> ModelKind {
        ModelKind::Concat
    }

    fn config(&self) -> &FusionConfig {
        &self.config
    }

    fn forward(&self, fa: &Tensor, fb: &Tensor, batch: usize, ctx: &ForwardCtx) -> Result<Tensor> {
        let clips = clips_per_sample(fa, fb, batch, self.config.model_dim)?;
        let h = joint_representation(fa, fb, &self.fc)?.relu();
        let h = ctx.dropout(&h, self.config.dropout_rate)?;
        self.head.forward(&pool(&h, batch, clips, self.config.per_clip)?)
    }
}

impl Module for ConcatBaseline {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        self.fc.collect_params(&join(prefix, "fc"), out);
        self.head.collect_params(&join(prefix, "head"), out);
    }
}

/// One stream through its encoder, pooled, then a linear head. The other
/// stream is checked for alignment and otherwise ignored.
#[derive(Debug, Clone)]
pub struct UnimodalModel {
    pub config: FusionConfig,
    pub modality: Modality,
    pub encoder: Encoder,
    pub head: Linear,
}

impl UnimodalModel {
    pub fn new<R: Rng + ?Sized>(modality: Modality, cfg: &FusionConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(UnimodalModel {
            config: cfg.clone(),
            modality,
            encoder: cfg.encoder(rng)?,
            head: Linear::new(cfg.model_dim, cfg.head_output_dim, rng),
        })
    }
}

impl FusionModel for UnimodalModel {
    fn kind(&self) -> ModelKind {
        match self.modality {
            Modality::A => ModelKind::UnimodalA,
            Modality::B => ModelKind::UnimodalB,
        }
    }

    fn config(&self) -> &FusionConfig {
        &self.config
    }

    fn forward(&self, fa: &Tensor, fb: &Tensor, batch: usize, ctx: &ForwardCtx) -> Result<Tensor> {
        let cfg = &self.config;
        let clips = clips_per_sample(fa, fb, batch, cfg.model_dim)?;
        let x = match self.modality {
            Modality::A => fa,
            Modality::B => fb,
        };
        let x = with_positions(x, batch, clips, cfg.positional_encoding)?;
        let h = self.encoder.forward(&x, batch, ctx)?;
        self.head.forward(&pool(&h, batch, clips, cfg.per_clip)?)
    }
}

impl Module for UnimodalModel {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        self.encoder.collect_params(&join(prefix, "encoder"), out);
        self.head.collect_params(&join(prefix, "head"), out);
    }
}
