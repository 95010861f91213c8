//! Fused neural-network kernels with hand-written backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{axis_extents, matmul_nt, matmul_raw, matmul_tn};
use super::Tensor;
use crate::error::{Error, Result};

/// Divisor applied to attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScaling {
    /// `QK^T / sqrt(d_k)`.
    #[default]
    SqrtDk,
    /// `QK^T / d_k`, as literally printed in the original formulation.
    Dk,
}

impl AttentionScaling {
    pub fn divisor(self, head_dim: usize) -> f64 {
        match self {
            AttentionScaling::SqrtDk => (head_dim as f64).sqrt(),
            AttentionScaling::Dk => head_dim as f64,
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

impl Tensor {
    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for shape {:?}", self.shape()),
            ));
        }
        if self.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric {
                op: "softmax",
                detail: "NaN in input".into(),
            });
        }
        let (outer, len, inner) = axis_extents(self.shape(), axis);
        let src = self.data();
        let mut out = vec![0.0; src.len()];
        let mut lane = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for a in 0..len {
                    lane[a] = src[(o * len + a) * inner + i];
                }
                softmax_in_place(&mut lane);
                for a in 0..len {
                    out[(o * len + a) * inner + i] = lane[a];
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                        for a in 0..len {
                            gx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Normalizes each row of the last axis to zero mean and unit variance,
    /// then applies `gain * x + shift`.
    pub fn layer_norm(&self, gain: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().expect("rank >= 1");
        if gain.numel() != d || shift.numel() != d {
            return Err(Error::shape("layer_norm", self.shape(), gain.shape()));
        }
        let rows = self.numel() / d;
        let x = self.data();
        let gm = gain.data();
        let sh = shift.data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gm[j] * h + sh[j];
            }
        }
        drop((x, gm, sh));
        Ok(Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gain.clone(), shift.clone()],
            Box::new(move |g, _, parents| {
                let gm = parents[1].data();
                let mut gx = vec![0.0; g.len()];
                let mut ggain = vec![0.0; d];
                let mut gshift = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_gh = 0.0;
                    let mut sum_ghh = 0.0;
                    for j in 0..d {
                        ggain[j] += gr[j] * hr[j];
                        gshift[j] += gr[j];
                        let gh = gr[j] * gm[j];
                        sum_gh += gh;
                        sum_ghh += gh * hr[j];
                    }
                    for j in 0..d {
                        let gh = gr[j] * gm[j];
                        gx[r * d + j] = inv_std[r] * (gh - sum_gh / d as f64 - hr[j] * sum_ghh / d as f64);
                    }
                }
                vec![Some(gx), Some(ggain), Some(gshift)]
            }),
        ))
    }

    /// Valid (unpadded) 1-D convolution.
    ///
    /// Input is `[length, in_channels]`, weight `[filters, in_channels, kernel]`,
    /// output `[(length - kernel) / stride + 1, filters]`.
    pub fn conv1d(&self, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
        if self.rank() != 2 || weight.rank() != 3 || weight.shape()[1] != self.shape()[1] {
            return Err(Error::shape("conv1d", self.shape(), weight.shape()));
        }
        let (len, cin) = (self.shape()[0], self.shape()[1]);
        let (filters, _, kernel) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
        if bias.numel() != filters {
            return Err(Error::shape("conv1d", weight.shape(), bias.shape()));
        }
        if stride == 0 {
            return Err(Error::invalid("conv1d", "stride must be positive"));
        }
        if len < kernel {
            return Err(Error::invalid(
                "conv1d",
                format!("input length {len} shorter than kernel {kernel}"),
            ));
        }
        let out_len = (len - kernel) / stride + 1;
        // im2col: [out_len, cin * kernel] with column index c * kernel + k
        let cols = cin * kernel;
        let x = self.data();
        let mut patches = vec![0.0; out_len * cols];
        for t in 0..out_len {
            for c in 0..cin {
                for k in 0..kernel {
                    patches[t * cols + c * kernel + k] = x[(t * stride + k) * cin + c];
                }
            }
        }
        drop(x);
        // weight as [filters, cols]; out = patches x weight^T
        let mut out = matmul_nt(&patches, &weight.data(), out_len, cols, filters);
        {
            let b = bias.data();
            for row in out.chunks_exact_mut(filters) {
                row.iter_mut().zip(b.iter()).for_each(|(o, b)| *o += b);
            }
        }
        Ok(Tensor::from_op(
            "conv1d",
            vec![out_len, filters],
            out,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |g, _, parents| {
                let gx = parents[0].requires_grad().then(|| {
                    // d patches = g [out_len, filters] x weight [filters, cols]
                    let gp = matmul_raw(g, &parents[1].data(), out_len, filters, cols);
                    let mut gx = vec![0.0; len * cin];
                    for t in 0..out_len {
                        for c in 0..cin {
                            for k in 0..kernel {
                                gx[(t * stride + k) * cin + c] += gp[t * cols + c * kernel + k];
                            }
                        }
                    }
                    gx
                });
                // d weight = g^T [filters, out_len] x patches [out_len, cols]
                let gw = parents[1]
                    .requires_grad()
                    .then(|| matmul_tn(g, &patches, filters, out_len, cols));
                let gb = parents[2].requires_grad().then(|| {
                    let mut gb = vec![0.0; filters];
                    for row in g.chunks_exact(filters) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    gb
                });
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Max pooling over the first axis of a `[length, channels]` tensor.
    pub fn maxpool1d(&self, kernel: usize, stride: usize) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::invalid(
                "maxpool1d",
                format!("needs rank 2, got {:?}", self.shape()),
            ));
        }
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid("maxpool1d", "kernel and stride must be positive"));
        }
        let (len, ch) = (self.shape()[0], self.shape()[1]);
        if len < kernel {
            return Err(Error::invalid(
                "maxpool1d",
                format!("input length {len} shorter than kernel {kernel}"),
            ));
        }
        let out_len = (len - kernel) / stride + 1;
        let x = self.data();
        let mut out = vec![0.0; out_len * ch];
        let mut argmax = vec![0usize; out_len * ch];
        for t in 0..out_len {
            for c in 0..ch {
                let mut best = t * stride * ch + c;
                for k in 1..kernel {
                    let j = (t * stride + k) * ch + c;
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                out[t * ch + c] = x[best];
                argmax[t * ch + c] = best;
            }
        }
        drop(x);
        let n = len * ch;
        Ok(Tensor::from_op(
            "maxpool1d",
            vec![out_len, ch],
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; n];
                for (gi, &src) in g.iter().zip(&argmax) {
                    gx[src] += gi;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`. Identity when `training` is false.
    pub fn dropout<R: Rng + ?Sized>(&self, rate: f64, training: bool, rng: &mut R) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        Ok(Tensor::from_op(
            "dropout",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.iter().zip(&mask).map(|(g, m)| g * m).collect())]),
        ))
    }

    /// Mean negative log-likelihood of integer labels under row-wise softmax.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 || self.shape()[0] != labels.len() {
            return Err(Error::shape("cross_entropy", self.shape(), &[labels.len()]));
        }
        let (n, c) = (self.shape()[0], self.shape()[1]);
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = self.to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_exact_mut(c).zip(labels) {
            softmax_in_place(row);
            loss -= row[label].max(f64::MIN_POSITIVE).ln();
        }
        loss /= n as f64;
        let labels = labels.to_vec();
        Ok(Tensor::from_op(
            "cross_entropy",
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = probs.clone();
                for (row, &label) in gx.chunks_exact_mut(c).zip(&labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= g[0] / n as f64);
                }
                vec![Some(gx)]
            }),
        ))
    }
}

/// Output of [`multi_head_attention`].
pub struct AttentionOutput {
    /// `[batch * q_len, model_dim]`, heads concatenated along columns.
    pub output: Tensor,
    /// Attention probabilities laid out as `[batch, heads, q_len, kv_len]`.
    pub weights: Vec<f64>,
}

/// Scaled dot-product attention over `batch` independent sequences and
/// `heads` column groups.
///
/// `q` is `[batch * q_len, d]`, `k` and `v` are `[batch * kv_len, d]`; head
/// `h` uses columns `h * d / heads .. (h + 1) * d / heads`.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    batch: usize,
    heads: usize,
    scaling: AttentionScaling,
) -> Result<AttentionOutput> {
    if q.rank() != 2 || k.rank() != 2 || q.shape()[1] != k.shape()[1] {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    if k.shape() != v.shape() {
        return Err(Error::shape("attention", k.shape(), v.shape()));
    }
    let d = q.shape()[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("model dim {d} not divisible by {heads} heads")));
    }
    if batch == 0 || !q.shape()[0].is_multiple_of(batch) || !k.shape()[0].is_multiple_of(batch) {
        return Err(Error::invalid(
            "attention",
            format!("rows {:?}/{:?} not divisible by batch {batch}", q.shape(), k.shape()),
        ));
    }
    let tq = q.shape()[0] / batch;
    let tk = k.shape()[0] / batch;
    let dk = d / heads;
    let inv_scale = 1.0 / scaling.divisor(dk);

    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut weights = vec![0.0; batch * heads * tq * tk];
    let mut out = vec![0.0; batch * tq * d];
    for b in 0..batch {
        for h in 0..heads {
            let w = &mut weights[((b * heads + h) * tq) * tk..((b * heads + h + 1) * tq) * tk];
            for i in 0..tq {
                let qrow = &qd[(b * tq + i) * d + h * dk..][..dk];
                let wrow = &mut w[i * tk..(i + 1) * tk];
                for (j, wj) in wrow.iter_mut().enumerate() {
                    let krow = &kd[(b * tk + j) * d + h * dk..][..dk];
                    *wj = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * inv_scale;
                }
                softmax_in_place(wrow);
                let orow = &mut out[(b * tq + i) * d + h * dk..][..dk];
                for (j, &wj) in wrow.iter().enumerate() {
                    let vrow = &vd[(b * tk + j) * d + h * dk..][..dk];
                    orow.iter_mut().zip(vrow).for_each(|(o, v)| *o += wj * v);
                }
            }
        }
    }
    drop((qd, kd, vd));

    let probs = weights.clone();
    let output = Tensor::from_op(
        "attention",
        vec![batch * tq, d],
        out,
        vec![q.clone(), k.clone(), v.clone()],
        Box::new(move |g, _, parents| {
            let (qd, kd, vd) = (parents[0].data(), parents[1].data(), parents[2].data());
            let mut gq = vec![0.0; qd.len()];
            let mut gk = vec![0.0; kd.len()];
            let mut gv = vec![0.0; vd.len()];
            let mut gs = vec![0.0; tk];
            for b in 0..batch {
                for h in 0..heads {
                    let w = &probs[((b * heads + h) * tq) * tk..((b * heads + h + 1) * tq) * tk];
                    for i in 0..tq {
                        let grow = &g[(b * tq + i) * d + h * dk..][..dk];
                        let wrow = &w[i * tk..(i + 1) * tk];
                        // dP_ij = g_i . v_j ; dV_j += P_ij g_i
                        for j in 0..tk {
                            let voff = (b * tk + j) * d + h * dk;
                            let vrow = &vd[voff..voff + dk];
                            gs[j] = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                            gv[voff..voff + dk]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(acc, gi)| *acc += wrow[j] * gi);
                        }
                        let dot: f64 = gs.iter().zip(wrow).map(|(a, b)| a * b).sum();
                        let qoff = (b * tq + i) * d + h * dk;
                        for j in 0..tk {
                            let ds = wrow[j] * (gs[j] - dot) * inv_scale;
                            let koff = (b * tk + j) * d + h * dk;
                            for c in 0..dk {
                                gq[qoff + c] += ds * kd[koff + c];
                                gk[koff + c] += ds * qd[qoff + c];
                            }
                        }
                    }
                }
            }
            vec![Some(gq), Some(gk), Some(gv)]
        }),
    );
    Ok(AttentionOutput { output, weights })
}
