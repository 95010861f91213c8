//! Elementwise, linear-algebra, reduction and shape operations.

use super::Tensor;
use crate::error::{Error, Result};

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::invalid(
            op,
            format!("axis {axis} out of range for shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

#[derive(Clone, Copy)]
enum Bcast {
    Same,
    LhsScalar,
    RhsScalar,
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Bcast, Vec<usize>)> {
    if a.shape() == b.shape() {
        Ok((Bcast::Same, a.shape().to_vec()))
    } else if b.numel() == 1 {
        Ok((Bcast::RhsScalar, a.shape().to_vec()))
    } else if a.numel() == 1 {
        Ok((Bcast::LhsScalar, b.shape().to_vec()))
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

/// Reduces a full-size gradient to the operand's size (sums when the operand was a scalar).
fn collapse(grad: Vec<f64>, scalar: bool) -> Vec<f64> {
    if scalar {
        vec![grad.iter().sum()]
    } else {
        grad
    }
}

impl Tensor {
    fn binary(
        &self,
        other: &Tensor,
        tag: &'static str,
        f: fn(f64, f64) -> f64,
        // partial derivatives (d/da, d/db) evaluated at (a, b)
        df: fn(f64, f64) -> (f64, f64),
    ) -> Result<Tensor> {
        let (kind, shape) = broadcast_kind(tag, self, other)?;
        let a = self.data();
        let b = other.data();
        let n: usize = shape.iter().product();
        let pick = move |i: usize, a: &[f64], b: &[f64]| match kind {
            Bcast::Same => (a[i], b[i]),
            Bcast::LhsScalar => (a[0], b[i]),
            Bcast::RhsScalar => (a[i], b[0]),
        };
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = pick(i, &a, &b);
                f(x, y)
            })
            .collect();
        drop((a, b));
        Ok(Tensor::from_op(
            tag,
            shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, parents| {
                let a = parents[0].data();
                let b = parents[1].data();
                let mut ga = parents[0].requires_grad().then(|| vec![0.0; g.len()]);
                let mut gb = parents[1].requires_grad().then(|| vec![0.0; g.len()]);
                for i in 0..g.len() {
                    let (x, y) = pick(i, &a, &b);
                    let (dx, dy) = df(x, y);
                    if let Some(ga) = ga.as_mut() {
                        ga[i] = g[i] * dx;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[i] = g[i] * dy;
                    }
                }
                vec![
                    ga.map(|v| collapse(v, matches!(kind, Bcast::LhsScalar))),
                    gb.map(|v| collapse(v, matches!(kind, Bcast::RhsScalar))),
                ]
            }),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b, |_, _| (1.0, -1.0))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b, |a, b| (b, a))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", |a, b| a / b, |a, b| (1.0 / b, -a / (b * b)))
    }

    fn unary(&self, tag: &'static str, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            tag,
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            // df receives (input, output)
            Box::new(move |g, y, parents| {
                let x = parents[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter().zip(y))
                        .map(|(g, (&x, &y))| g * df(x, y))
                        .collect(),
                )]
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        super::gradcheck::observe_relu_inputs(&self.data());
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(&self) -> Tensor {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary("sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Tensor {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn neg(&self) -> Tensor {
        self.unary("neg", |x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|x| x * factor).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.iter().map(|g| g * factor).collect())]),
        )
    }

    pub fn add_scalar(&self, value: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|x| x + value).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        )
    }

    /// Adds a length-`n` row vector to every row of an `[.., n]` tensor.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let n = *self.shape().last().expect("rank >= 1");
        if bias.numel() != n {
            return Err(Error::shape("add_bias", self.shape(), bias.shape()));
        }
        let b = bias.data();
        let out: Vec<f64> = self.data().iter().enumerate().map(|(i, x)| x + b[i % n]).collect();
        drop(b);
        Ok(Tensor::from_op(
            "add_bias",
            self.shape().to_vec(),
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _, _| {
                let mut gb = vec![0.0; n];
                for row in g.chunks_exact(n) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![Some(g.to_vec()), Some(gb)]
            }),
        ))
    }

    /// Matrix product of `[m, k] x [k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let out = matmul_raw(&self.data(), &other.data(), m, k, n);
        Ok(Tensor::from_op(
            "matmul",
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, parents| {
                let ga = parents[0]
                    .requires_grad()
                    .then(|| matmul_nt(g, &parents[1].data(), m, n, k));
                let gb = parents[1]
                    .requires_grad()
                    .then(|| matmul_tn(&parents[0].data(), g, k, m, n));
                vec![ga, gb]
            }),
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::invalid(
                "transpose",
                format!("needs rank 2, got {:?}", self.shape()),
            ));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let out = transpose_raw(&self.data(), r, c);
        Ok(Tensor::from_op(
            "transpose",
            vec![c, r],
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(transpose_raw(g, c, r))]),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors.first().ok_or_else(|| Error::invalid("concat", "no operands"))?;
        check_axis("concat", first, axis)?;
        for t in &tensors[1..] {
            let compatible = t.rank() == first.rank()
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", first.shape(), t.shape()));
            }
        }
        let (outer, _, inner) = axis_extents(first.shape(), axis);
        let lens: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;

        let mut out = Vec::with_capacity(outer * total * inner);
        let datas: Vec<_> = tensors.iter().map(|t| t.data()).collect();
        for o in 0..outer {
            for (d, &len) in datas.iter().zip(&lens) {
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        drop(datas);
        Ok(Tensor::from_op(
            "concat",
            shape,
            out,
            tensors.to_vec(),
            Box::new(move |g, _, parents| {
                let mut grads: Vec<Vec<f64>> = lens
                    .iter()
                    .map(|&len| Vec::with_capacity(outer * len * inner))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gr, &len) in grads.iter_mut().zip(&lens) {
                        gr.extend_from_slice(&g[pos..pos + len * inner]);
                        pos += len * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(parents)
                    .map(|(gr, p)| p.requires_grad().then_some(gr))
                    .collect()
            }),
        ))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis("slice", self, axis)?;
        if len == 0 || start + len > self.shape()[axis] {
            return Err(Error::invalid(
                "slice",
                format!(
                    "range {start}..{} outside axis {axis} of {:?}",
                    start + len,
                    self.shape()
                ),
            ));
        }
        let (outer, full, inner) = axis_extents(self.shape(), axis);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let src = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        drop(src);
        Ok(Tensor::from_op(
            "slice",
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Inverse of [`Tensor::concat`]: cuts `axis` into pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        check_axis("split", self, axis)?;
        if sizes.iter().sum::<usize>() != self.shape()[axis] {
            return Err(Error::invalid(
                "split",
                format!("sizes {sizes:?} do not cover axis {axis} of {:?}", self.shape()),
            ));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let t = self.slice(axis, start, len);
                start += len;
                t
            })
            .collect()
    }

    pub fn sum(&self) -> Tensor {
        let total = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("sum_axis", self, axis)?;
        let (outer, len, inner) = axis_extents(self.shape(), axis);
        let src = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(acc, x)| *acc += x);
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            "sum_axis",
            reduced_shape(self.shape(), axis),
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("mean_axis", self, axis)?;
        let len = self.shape()[axis] as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / len))
    }

    /// Population variance (1/N) along `axis`, removing it.
    pub fn variance_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("variance_axis", self, axis)?;
        let (outer, len, inner) = axis_extents(self.shape(), axis);
        let src = self.data();
        let mut means = vec![0.0; outer * inner];
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| src[(o * len + a) * inner + i];
                let mu = (0..len).map(at).sum::<f64>() / len as f64;
                means[o * inner + i] = mu;
                out[o * inner + i] = (0..len).map(|a| (at(a) - mu).powi(2)).sum::<f64>() / len as f64;
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            "variance_axis",
            reduced_shape(self.shape(), axis),
            out,
            vec![self.clone()],
            Box::new(move |g, _, parents| {
                let x = parents[0].data();
                let mut gx = vec![0.0; x.len()];
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            let j = (o * len + a) * inner + i;
                            let k = o * inner + i;
                            gx[j] = g[k] * 2.0 * (x[j] - means[k]) / len as f64;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

/// Plain `[m,k] x [k,n]` product on raw slices.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += aip * bv);
        }
    }
    out
}

/// `a [m,k] x b^T` where `b` is stored as `[n,k]`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T x b` where `a` is stored as `[k,m]` and `b` as `[k,n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            out[i * n..(i + 1) * n]
                .iter_mut()
                .zip(brow)
                .for_each(|(o, &bv)| *o += api * bv);
        }
    }
    out
}

pub(crate) fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}
