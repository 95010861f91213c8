//! Straight-line reimplementation of the fusion forward pass over plain
//! vectors. Each helper loops explicitly over row-major data and never calls
//! the tensor ops, so agreement with the model is an independent check.
#![allow(dead_code, clippy::needless_range_loop)]

use jmt_core::fusion::{AggregationMode, Branch, CrossAttentionFusion, FusionConfig, FusionModel};
use jmt_core::nn::{EncoderBlock, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use jmt_core::nn::{ForwardCtx, Module};
use jmt_core::tensor::{AttentionScaling, Tensor};
use jmt_core::Seed;
use rand::Rng;

pub fn linear(x: &[f64], rows: usize, lin: &Linear) -> Vec<f64> {
    let (i_dim, o_dim) = (lin.in_dim(), lin.out_dim());
    let w = lin.weight.to_vec();
    let b = lin.bias.to_vec();
    let mut out = vec![0.0; rows * o_dim];
    for r in 0..rows {
        for o in 0..o_dim {
            let mut acc = b[o];
            for i in 0..i_dim {
                acc += x[r * i_dim + i] * w[i * o_dim + o];
            }
            out[r * o_dim + o] = acc;
        }
    }
    out
}

fn project(x: &[f64], rows: usize, w: &Tensor, d: usize) -> Vec<f64> {
    let w = w.to_vec();
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        for c in 0..d {
            for p in 0..d {
                out[r * d + c] += x[r * d + p] * w[p * d + c];
            }
        }
    }
    out
}

pub fn layer_norm(x: &[f64], d: usize, ln: &LayerNorm) -> Vec<f64> {
    let (g, s) = (ln.gain.to_vec(), ln.shift.to_vec());
    let mut out = vec![0.0; x.len()];
    for (r, row) in x.chunks(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        for c in 0..d {
            out[r * d + c] = (row[c] - mean) / (var + ln.eps).sqrt() * g[c] + s[c];
        }
    }
    out
}

pub fn attention(q_src: &[f64], kv_src: &[f64], batch: usize, d: usize, mha: &MultiHeadAttention) -> Vec<f64> {
    let tq = q_src.len() / d / batch;
    let tk = kv_src.len() / d / batch;
    let q = project(q_src, batch * tq, &mha.w_q, d);
    let k = project(kv_src, batch * tk, &mha.w_k, d);
    let v = project(kv_src, batch * tk, &mha.w_v, d);
    let dk = d / mha.num_heads;
    let div = match mha.scaling {
        AttentionScaling::SqrtDk => (dk as f64).sqrt(),
        AttentionScaling::Dk => dk as f64,
    };
    let mut heads = vec![0.0; batch * tq * d];
    for b in 0..batch {
        for h in 0..mha.num_heads {
            for i in 0..tq {
                let qi = (b * tq + i) * d + h * dk;
                let mut logits = vec![0.0; tk];
                for j in 0..tk {
                    let kj = (b * tk + j) * d + h * dk;
                    logits[j] = (0..dk).map(|c| q[qi + c] * k[kj + c]).sum::<f64>() / div;
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dk {
                    heads[qi + c] = (0..tk).map(|j| e[j] / z * v[(b * tk + j) * d + h * dk + c]).sum();
                }
            }
        }
    }
    project(&heads, batch * tq, &mha.w_o, d)
}

fn ffn(x: &[f64], rows: usize, ff: &FeedForward) -> Vec<f64> {
    let h: Vec<f64> = linear(x, rows, &ff.inner).into_iter().map(|v| v.max(0.0)).collect();
    linear(&h, rows, &ff.outer)
}

pub fn block(x: &[f64], src: &[f64], batch: usize, d: usize, blk: &EncoderBlock) -> Vec<f64> {
    let rows = x.len() / d;
    let a = attention(x, src, batch, d, &blk.attention);
    let r1: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
    let z = layer_norm(&r1, d, &blk.norm1);
    let f = ffn(&z, rows, &blk.feed_forward);
    let r2: Vec<f64> = z.iter().zip(&f).map(|(p, q)| p + q).collect();
    layer_norm(&r2, d, &blk.norm2)
}

pub fn positions(x: &[f64], batch: usize, d: usize) -> Vec<f64> {
    let t = x.len() / d / batch;
    let mut out = x.to_vec();
    for b in 0..batch {
        for pos in 0..t {
            for i in 0..d {
                let angle = pos as f64 / 10000f64.powf((i - i % 2) as f64 / d as f64);
                out[(b * t + pos) * d + i] += if i % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
    }
    out
}

pub fn fusion(model: &CrossAttentionFusion, fa: &[f64], fb: &[f64], batch: usize) -> Vec<f64> {
    let cfg = &model.config;
    let d = cfg.model_dim;
    let rows = fa.len() / d;
    let t = rows / batch;
    let (mut fa, mut fb) = (fa.to_vec(), fb.to_vec());
    if cfg.positional_encoding {
        fa = positions(&fa, batch, d);
        fb = positions(&fb, batch, d);
    }
    let mut streams = vec![fa.clone(), fb.clone()];
    if let Some(fc) = &model.joint_fc {
        let mut cat = Vec::with_capacity(rows * 2 * d);
        for r in 0..rows {
            cat.extend_from_slice(&fb[r * d..(r + 1) * d]);
            cat.extend_from_slice(&fa[r * d..(r + 1) * d]);
        }
        streams.push(linear(&cat, rows, fc));
    }
    let encoded: Vec<Vec<f64>> = streams
        .iter()
        .zip(&model.encoders)
        .map(|(s, enc)| {
            let mut h = s.clone();
            for blk in &enc.blocks {
                h = block(&h, &h, batch, d, blk);
            }
            h
        })
        .collect();
    let idx = |b: Branch| match b {
        Branch::A => 0,
        Branch::B => 1,
        Branch::J => 2,
    };
    let m = model.pairs.len();
    let groups = if cfg.per_clip { rows } else { batch };
    // flat[g][i*d..]: block i's (pooled) vector for group g
    let mut flat = vec![0.0; groups * m * d];
    for (i, ((q, kv), blk)) in model.pairs.iter().zip(&model.cross).enumerate() {
        let y = block(&encoded[idx(*q)], &encoded[idx(*kv)], batch, d, blk);
        for g in 0..groups {
            for c in 0..d {
                flat[g * m * d + i * d + c] = if cfg.per_clip {
                    y[g * d + c]
                } else {
                    (0..t).map(|s| y[(g * t + s) * d + c]).sum::<f64>() / t as f64
                };
            }
        }
    }
    if let Some(agg) = &model.aggregator {
        flat = block(&flat, &flat, groups, d, agg);
    }
    linear(&flat, groups, &model.head)
}

pub fn random_config<R: Rng>(r: &mut R) -> FusionConfig {
    let (d, heads) = [(4, 1), (4, 2), (6, 3), (8, 2), (8, 4), (12, 3)][r.random_range(0..6)];
    FusionConfig {
        model_dim: d,
        num_heads: heads,
        ff_dim: r.random_range(2..12),
        encoder_depth: r.random_range(0..3),
        aggregation_mode: if r.random() {
            AggregationMode::SelfAttentionStack
        } else {
            AggregationMode::ConcatFc
        },
        scaling_variant: if r.random() {
            AttentionScaling::SqrtDk
        } else {
            AttentionScaling::Dk
        },
        dropout_rate: 0.0,
        head_output_dim: r.random_range(1..4),
        positional_encoding: r.random(),
        per_clip: r.random(),
    }
}

/// Largest absolute difference between the model and the oracle over
/// `cases` random configurations, alternating joint and vanilla models.
pub fn max_error_over_random_cases(cases: usize, seed: u64) -> f64 {
    let mut r = Seed(seed).rng();
    let mut worst = 0.0f64;
    for case in 0..cases {
        let cfg = random_config(&mut r);
        let model = if case % 2 == 0 {
            CrossAttentionFusion::joint(&cfg, &mut r).unwrap()
        } else {
            CrossAttentionFusion::vanilla(&cfg, &mut r).unwrap()
        };
        // move norms and biases away from their identity init
        for p in model.parameters() {
            p.update(|v| v.iter_mut().for_each(|x| *x += 0.3 * (r.random::<f64>() - 0.5)));
        }
        let batch = r.random_range(1..4);
        let t = r.random_range(1..5);
        let fa = Tensor::randn(&[batch * t, cfg.model_dim], &mut r);
        let fb = Tensor::randn(&[batch * t, cfg.model_dim], &mut r);
        let got = model.forward(&fa, &fb, batch, &ForwardCtx::eval()).unwrap();
        let groups = if cfg.per_clip { batch * t } else { batch };
        assert_eq!(got.shape(), &[groups, cfg.head_output_dim]);
        let want = fusion(&model, &fa.to_vec(), &fb.to_vec(), batch);
        let err = got
            .to_vec()
            .iter()
            .zip(&want)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
    }
    worst
}
