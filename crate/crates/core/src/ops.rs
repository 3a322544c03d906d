//! Primitive differentiable operations recorded on a [`Tape`].
//!
//! Matrices are `[features, tokens]`. Ops that must not mix tokens of
//! different samples take a `seg_len`: the token axis is a concatenation of
//! independent sequences of that length.

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GeluKind {
    #[default]
    Tanh,
    Erf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Padding {
    /// Centred kernel, output length equals input length.
    #[default]
    Same,
    /// Kernel sees only the current and earlier tokens.
    Causal,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn gelu_value(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Tanh => 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh()),
        GeluKind::Erf => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
    }
}

fn gelu_deriv(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Tanh => {
            let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
        }
        GeluKind::Erf => {
            let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)) + x * pdf
        }
    }
}

pub fn silu_value(x: f64) -> f64 {
    x * sigmoid(x)
}

fn as_matrix_dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// Per-column mean and `1/sqrt(var + eps)` over the feature axis.
fn column_stats(x: &Tensor, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let (d, n) = as_matrix_dims(x);
    let xs = x.data();
    let mut mean = vec![0.0; n];
    for r in 0..d {
        for (m, v) in mean.iter_mut().zip(&xs[r * n..(r + 1) * n]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= d as f64);
    let mut var = vec![0.0; n];
    for r in 0..d {
        for ((s, v), m) in var.iter_mut().zip(&xs[r * n..(r + 1) * n]).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let rstd = var.iter().map(|v| 1.0 / (v / d as f64 + eps).sqrt()).collect();
    (mean, rstd)
}

/// Per-row mean and population variance over the token axis.
pub fn row_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (d, n) = as_matrix_dims(x);
    let mut mean = Vec::with_capacity(d);
    let mut var = Vec::with_capacity(d);
    for r in 0..d {
        let row = x.row(r);
        let m = row.iter().sum::<f64>() / n as f64;
        mean.push(m);
        var.push(row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64);
    }
    (mean, var)
}

/// Attention probabilities per (segment, head): `heads * segments` matrices of
/// shape `[seg_len, seg_len]`, rows are queries.
pub fn attention_weights(q: &Tensor, k: &Tensor, heads: usize, seg_len: usize) -> Result<Vec<Tensor>> {
    check_attention_dims(q, k, q, heads, seg_len)?;
    let (d, n) = as_matrix_dims(q);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Vec::new();
    for s in 0..n / seg_len {
        for h in 0..heads {
            let mut w = Vec::with_capacity(seg_len * seg_len);
            for i in 0..seg_len {
                w.extend(attention_row(q.data(), k.data(), n, h * dh, dh, s * seg_len, seg_len, i, scale));
            }
            out.push(Tensor::from_parts(vec![seg_len, seg_len], w));
        }
    }
    Ok(out)
}

fn check_attention_dims(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, seg_len: usize) -> Result<()> {
    if q.dims() != k.dims() || q.dims() != v.dims() || q.rank() != 2 {
        return shape_err("attention q/k/v must be equal 2-D shapes");
    }
    if heads == 0 || !q.rows().is_multiple_of(heads) {
        return Err(Error::Shape(format!("embedding dim {} not divisible by {heads} heads", q.rows())));
    }
    if seg_len == 0 || !q.cols().is_multiple_of(seg_len) {
        return shape_err("token count not a multiple of the segment length");
    }
    Ok(())
}

/// Softmax row for query `i` of one segment/head.
#[allow(clippy::too_many_arguments)]
fn attention_row(
    q: &[f64],
    k: &[f64],
    n: usize,
    c0: usize,
    dh: usize,
    base: usize,
    t: usize,
    i: usize,
    scale: f64,
) -> Vec<f64> {
    let mut s = vec![0.0; t];
    for c in c0..c0 + dh {
        let qi = q[c * n + base + i] * scale;
        for (sj, kj) in s.iter_mut().zip(&k[c * n + base..c * n + base + t]) {
            *sj += qi * kj;
        }
    }
    let m = s.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut z = 0.0;
    for sj in &mut s {
        *sj = (*sj - m).exp();
        z += *sj;
    }
    s.iter_mut().for_each(|p| *p /= z);
    s
}

fn check_segments(n: usize, seg_len: usize) -> Result<()> {
    if seg_len == 0 || !n.is_multiple_of(seg_len) {
        return Err(Error::Shape(format!("{n} tokens are not a multiple of segment length {seg_len}")));
    }
    Ok(())
}

impl Tape {
    /// `W·x + b` with `x: [in, N]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xin, n) = as_matrix_dims(self.value(x));
        let wd = self.dims(w).to_vec();
        if wd.len() != 2 || wd[1] != xin || self.value(x).rank() != 2 {
            return Err(Error::Shape(format!("linear: weight {wd:?} cannot map input {:?}", self.dims(x))));
        }
        let out_dim = wd[0];
        if let Some(b) = b {
            if self.dims(b) != [out_dim] {
                return Err(Error::Shape(format!("linear: bias {:?} for out dim {out_dim}", self.dims(b))));
            }
        }
        let mut y = matmul(self.value(w).data(), self.value(x).data(), out_dim, xin, n);
        if let Some(b) = b {
            for (r, bv) in self.value(b).data().iter().enumerate() {
                y[r * n..(r + 1) * n].iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(OpKind::Linear, Tensor::from_parts(vec![out_dim, n], y), &parents, move |ctx| {
            let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
            let dy = ctx.grad.data();
            let dx = ctx.needs[0].then(|| Tensor::from_parts(vec![xin, n], matmul_tn(w.data(), dy, out_dim, xin, n)));
            let dw =
                ctx.needs[1].then(|| Tensor::from_parts(vec![out_dim, xin], matmul_nt(dy, x.data(), out_dim, n, xin)));
            let mut g = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                g.push(ctx.needs[2].then(|| {
                    Tensor::from_parts(
                        vec![out_dim],
                        (0..out_dim).map(|r| dy[r * n..(r + 1) * n].iter().sum()).collect(),
                    )
                }));
            }
            g
        })
    }

    /// Elementwise sum. `b` may also be a matrix with the same rows whose
    /// columns tile `a`'s columns (e.g. a positional table added to every sample).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if ad == bd {
            let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
            return self.push(OpKind::Add, v, &[a, b], |ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]);
        }
        let (ar, ac) = as_matrix_dims(self.value(a));
        let (br, bc) = as_matrix_dims(self.value(b));
        if ad.len() != 2 || bd.len() != 2 || ar != br || ac % bc != 0 {
            return Err(Error::Shape(format!("add: cannot broadcast {bd:?} onto {ad:?}")));
        }
        let bv = self.value(b).data();
        let mut v = self.value(a).clone();
        for r in 0..ar {
            let row = &mut v.data_mut()[r * ac..(r + 1) * ac];
            for (j, x) in row.iter_mut().enumerate() {
                *x += bv[r * bc + j % bc];
            }
        }
        self.push(OpKind::Add, v, &[a, b], move |ctx| {
            let g = ctx.grad.data();
            let mut db = vec![0.0; br * bc];
            for r in 0..br {
                for j in 0..ac {
                    db[r * bc + j % bc] += g[r * ac + j];
                }
            }
            vec![Some(ctx.grad.clone()), Some(Tensor::from_parts(vec![br, bc], db))]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape(format!("mul: {:?} vs {:?}", self.dims(a), self.dims(b))));
        }
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(OpKind::Mul, v, &[a, b], |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.zip_map(ctx.inputs[1], |g, y| g * y)),
                ctx.needs[1].then(|| ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x)),
            ]
        })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).scale(c);
        self.push(OpKind::Scale, v, &[a], move |ctx| vec![Some(ctx.grad.scale(c))])
    }

    /// Normalizes every token (column) over the feature axis, then applies
    /// `gain`/`shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (d, n) = as_matrix_dims(self.value(x));
        if self.dims(gain) != [d] || self.dims(shift) != [d] {
            return shape_err("layer_norm: gain/shift must be [D]");
        }
        let xv = self.value(x);
        let (mean, rstd) = column_stats(xv, eps);
        let (g, s) = (self.value(gain).data(), self.value(shift).data());
        let mut y = vec![0.0; d * n];
        for r in 0..d {
            for c in 0..n {
                y[r * n + c] = (xv.data()[r * n + c] - mean[c]) * rstd[c] * g[r] + s[r];
            }
        }
        self.push(OpKind::LayerNorm, Tensor::from_parts(vec![d, n], y), &[x, gain, shift], move |ctx| {
            let (x, g) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let dy = ctx.grad.data();
            let (mean, rstd) = column_stats(ctx.inputs[0], eps);
            let xhat = |r: usize, c: usize| (x[r * n + c] - mean[c]) * rstd[c];
            let dx = ctx.needs[0].then(|| {
                let mut m1 = vec![0.0; n];
                let mut m2 = vec![0.0; n];
                for r in 0..d {
                    for c in 0..n {
                        let dxh = dy[r * n + c] * g[r];
                        m1[c] += dxh;
                        m2[c] += dxh * xhat(r, c);
                    }
                }
                let mut dx = vec![0.0; d * n];
                for r in 0..d {
                    for c in 0..n {
                        let dxh = dy[r * n + c] * g[r];
                        dx[r * n + c] = rstd[c] * (dxh - m1[c] / d as f64 - xhat(r, c) * m2[c] / d as f64);
                    }
                }
                Tensor::from_parts(vec![d, n], dx)
            });
            let dg = ctx.needs[1].then(|| {
                Tensor::from_parts(vec![d], (0..d).map(|r| (0..n).map(|c| dy[r * n + c] * xhat(r, c)).sum()).collect())
            });
            let ds = ctx.needs[2]
                .then(|| Tensor::from_parts(vec![d], (0..d).map(|r| dy[r * n..(r + 1) * n].iter().sum()).collect()));
            vec![dx, dg, ds]
        })
    }

    /// Training-mode batch norm: each channel (row) is normalized over all tokens.
    pub fn batch_norm_train(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (d, n) = as_matrix_dims(self.value(x));
        if n < 2 {
            return Err(Error::Invalid(format!("batch_norm in training mode needs >= 2 tokens, got {n}")));
        }
        if self.dims(gain) != [d] || self.dims(shift) != [d] {
            return shape_err("batch_norm: gain/shift must be [D]");
        }
        let (mean, var) = row_stats(self.value(x));
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xv, g, s) = (self.value(x).data(), self.value(gain).data(), self.value(shift).data());
        let mut y = vec![0.0; d * n];
        for r in 0..d {
            for c in 0..n {
                y[r * n + c] = (xv[r * n + c] - mean[r]) * rstd[r] * g[r] + s[r];
            }
        }
        self.push(OpKind::BatchNormTrain, Tensor::from_parts(vec![d, n], y), &[x, gain, shift], move |ctx| {
            let (x, g) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let dy = ctx.grad.data();
            let (mean, var) = row_stats(ctx.inputs[0]);
            let mut dx = vec![0.0; d * n];
            let mut dg = vec![0.0; d];
            let mut ds = vec![0.0; d];
            for r in 0..d {
                let rstd = 1.0 / (var[r] + eps).sqrt();
                let row = r * n..(r + 1) * n;
                let xhat: Vec<f64> = x[row.clone()].iter().map(|v| (v - mean[r]) * rstd).collect();
                let dyr = &dy[row];
                let sdy: f64 = dyr.iter().sum();
                let sdyx: f64 = dyr.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                for c in 0..n {
                    dx[r * n + c] = rstd * g[r] * (dyr[c] - sdy / n as f64 - xhat[c] * sdyx / n as f64);
                }
                dg[r] = sdyx;
                ds[r] = sdy;
            }
            vec![
                ctx.needs[0].then(|| Tensor::from_parts(vec![d, n], dx)),
                ctx.needs[1].then(|| Tensor::from_parts(vec![d], dg)),
                ctx.needs[2].then(|| Tensor::from_parts(vec![d], ds)),
            ]
        })
    }

    /// Eval-mode batch norm using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gain: Var,
        shift: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Var> {
        let (d, n) = as_matrix_dims(self.value(x));
        if running_mean.dims() != [d] || running_var.dims() != [d] {
            return shape_err("batch_norm: running stats must be [D]");
        }
        let mean = running_mean.data().to_vec();
        let rstd: Vec<f64> = running_var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xv, g, s) = (self.value(x).data(), self.value(gain).data(), self.value(shift).data());
        let mut y = vec![0.0; d * n];
        for r in 0..d {
            for c in 0..n {
                y[r * n + c] = (xv[r * n + c] - mean[r]) * rstd[r] * g[r] + s[r];
            }
        }
        self.push(OpKind::BatchNormEval, Tensor::from_parts(vec![d, n], y), &[x, gain, shift], move |ctx| {
            let (x, g) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let dy = ctx.grad.data();
            let dx = Tensor::from_fn(&[d, n], |i| dy[i] * rstd[i / n] * g[i / n]);
            let dg =
                Tensor::from_fn(&[d], |r| (0..n).map(|c| dy[r * n + c] * (x[r * n + c] - mean[r]) * rstd[r]).sum());
            let ds = Tensor::from_fn(&[d], |r| dy[r * n..(r + 1) * n].iter().sum());
            vec![Some(dx), Some(dg), Some(ds)]
        })
    }

    pub fn gelu(&mut self, x: Var, kind: GeluKind) -> Result<Var> {
        let v = self.value(x).map(|t| gelu_value(t, kind));
        self.push(OpKind::Gelu, v, &[x], move |ctx| {
            vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, t| g * gelu_deriv(t, kind)))]
        })
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(silu_value);
        self.push(OpKind::Silu, v, &[x], |ctx| {
            vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, t| {
                let s = sigmoid(t);
                g * (s + t * s * (1.0 - s))
            }))]
        })
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(softplus);
        self.push(OpKind::Softplus, v, &[x], |ctx| vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, t| g * sigmoid(t)))])
    }

    /// Depth-wise 1-D convolution (cross-correlation) along the token axis of
    /// each segment, one odd-length kernel per channel, zero padded.
    pub fn dwconv1d(&mut self, x: Var, kernels: Var, seg_len: usize, padding: Padding) -> Result<Var> {
        let (d, n) = as_matrix_dims(self.value(x));
        let kd = self.dims(kernels).to_vec();
        if kd.len() != 2 || kd[0] != d {
            return Err(Error::Shape(format!("dwconv1d: kernels {kd:?} for {d} channels")));
        }
        let ks = kd[1];
        if ks.is_multiple_of(2) {
            return Err(Error::Invalid(format!("dwconv1d: kernel size must be odd, got {ks}")));
        }
        check_segments(n, seg_len)?;
        let off = match padding {
            Padding::Same => ks / 2,
            Padding::Causal => ks - 1,
        };
        // (output index, source index, tap) triples within one segment
        let taps: Vec<(usize, usize, usize)> = (0..seg_len)
            .flat_map(|t| {
                (0..ks).filter_map(move |j| {
                    let src = (t + j).checked_sub(off)?;
                    (src < seg_len).then_some((t, src, j))
                })
            })
            .collect();
        let (xv, kv) = (self.value(x).data(), self.value(kernels).data());
        let mut y = vec![0.0; d * n];
        for c in 0..d {
            for s in (0..n).step_by(seg_len) {
                for &(t, src, j) in &taps {
                    y[c * n + s + t] += kv[c * ks + j] * xv[c * n + s + src];
                }
            }
        }
        self.push(OpKind::DwConv1d, Tensor::from_parts(vec![d, n], y), &[x, kernels], move |ctx| {
            let (xv, kv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let dy = ctx.grad.data();
            let mut dx = vec![0.0; d * n];
            let mut dk = vec![0.0; d * ks];
            for c in 0..d {
                for s in (0..n).step_by(seg_len) {
                    for &(t, src, j) in &taps {
                        let g = dy[c * n + s + t];
                        dx[c * n + s + src] += kv[c * ks + j] * g;
                        dk[c * ks + j] += xv[c * n + s + src] * g;
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![d, n], dx)), Some(Tensor::from_parts(vec![d, ks], dk))]
        })
    }

    /// Scaled dot-product attention over every token of each segment, split
    /// into `heads` contiguous feature groups.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seg_len: usize) -> Result<Var> {
        check_attention_dims(self.value(q), self.value(k), self.value(v), heads, seg_len)?;
        let (d, n) = as_matrix_dims(self.value(q));
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let tasks: Vec<(usize, usize)> = (0..n / seg_len).flat_map(|s| (0..heads).map(move |h| (s, h))).collect();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let blocks: Vec<Vec<f64>> = tasks
            .par_iter()
            .map(|&(s, h)| {
                let base = s * seg_len;
                let mut out = vec![0.0; dh * seg_len];
                for i in 0..seg_len {
                    let p = attention_row(qv, kv, n, h * dh, dh, base, seg_len, i, scale);
                    for c in 0..dh {
                        let vrow = &vv[(h * dh + c) * n + base..(h * dh + c) * n + base + seg_len];
                        out[c * seg_len + i] = p.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    }
                }
                out
            })
            .collect();
        let mut y = vec![0.0; d * n];
        for (&(s, h), block) in tasks.iter().zip(&blocks) {
            for c in 0..dh {
                let dst = (h * dh + c) * n + s * seg_len;
                y[dst..dst + seg_len].copy_from_slice(&block[c * seg_len..(c + 1) * seg_len]);
            }
        }
        self.push(OpKind::Attention, Tensor::from_parts(vec![d, n], y), &[q, k, v], move |ctx| {
            let (qv, kv, vv) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
            let dout = ctx.grad.data();
            let grads: Vec<[Vec<f64>; 3]> = tasks
                .par_iter()
                .map(|&(s, h)| {
                    let base = s * seg_len;
                    let mut dq = vec![0.0; dh * seg_len];
                    let mut dk = vec![0.0; dh * seg_len];
                    let mut dv = vec![0.0; dh * seg_len];
                    for i in 0..seg_len {
                        let p = attention_row(qv, kv, n, h * dh, dh, base, seg_len, i, scale);
                        let mut dp = vec![0.0; seg_len];
                        for c in 0..dh {
                            let row = (h * dh + c) * n + base;
                            let g = dout[row + i];
                            for j in 0..seg_len {
                                dp[j] += g * vv[row + j];
                                dv[c * seg_len + j] += p[j] * g;
                            }
                        }
                        let pdp: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        let ds: Vec<f64> = p.iter().zip(&dp).map(|(pj, dpj)| pj * (dpj - pdp) * scale).collect();
                        for c in 0..dh {
                            let row = (h * dh + c) * n + base;
                            let mut acc = 0.0;
                            for j in 0..seg_len {
                                acc += ds[j] * kv[row + j];
                                dk[c * seg_len + j] += ds[j] * qv[row + i];
                            }
                            dq[c * seg_len + i] = acc;
                        }
                    }
                    [dq, dk, dv]
                })
                .collect();
            let mut out = [vec![0.0; d * n], vec![0.0; d * n], vec![0.0; d * n]];
            for (&(s, h), g) in tasks.iter().zip(&grads) {
                for c in 0..dh {
                    let dst = (h * dh + c) * n + s * seg_len;
                    for (o, src) in out.iter_mut().zip(g) {
                        o[dst..dst + seg_len].copy_from_slice(&src[c * seg_len..(c + 1) * seg_len]);
                    }
                }
            }
            out.into_iter().map(|g| Some(Tensor::from_parts(vec![d, n], g))).collect()
        })
    }

    /// Builds `batch` segments, each the concatenation of the matching
    /// segment of every part. Part `i` must have `batch * len_i` columns.
    pub fn interleave(&mut self, parts: &[Var], batch: usize) -> Result<Var> {
        if parts.is_empty() || batch == 0 {
            return shape_err("interleave: no parts");
        }
        let rows = self.value(parts[0]).rows();
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != rows || !t.cols().is_multiple_of(batch) {
                return Err(Error::Shape(format!("interleave: part dims {:?} for batch {batch}", t.dims())));
            }
            lens.push(t.cols() / batch);
        }
        let seg: usize = lens.iter().sum();
        let n = seg * batch;
        let mut y = vec![0.0; rows * n];
        for (pi, &p) in parts.iter().enumerate() {
            let src = self.value(p).data();
            let (len, pc) = (lens[pi], lens[pi] * batch);
            let off: usize = lens[..pi].iter().sum();
            for r in 0..rows {
                for b in 0..batch {
                    let dst = r * n + b * seg + off;
                    y[dst..dst + len].copy_from_slice(&src[r * pc + b * len..r * pc + (b + 1) * len]);
                }
            }
        }
        self.push(OpKind::Interleave, Tensor::from_parts(vec![rows, n], y), parts, move |ctx| {
            let g = ctx.grad.data();
            (0..lens.len())
                .map(|pi| {
                    if !ctx.needs[pi] {
                        return None;
                    }
                    let (len, pc) = (lens[pi], lens[pi] * batch);
                    let off: usize = lens[..pi].iter().sum();
                    let mut out = vec![0.0; rows * pc];
                    for r in 0..rows {
                        for b in 0..batch {
                            let src = r * n + b * seg + off;
                            out[r * pc + b * len..r * pc + (b + 1) * len].copy_from_slice(&g[src..src + len]);
                        }
                    }
                    Some(Tensor::from_parts(vec![rows, pc], out))
                })
                .collect()
        })
    }

    /// Inverse of [`Tape::interleave`]: extracts part `index` from `batch`
    /// segments laid out as `lens`.
    pub fn pick(&mut self, x: Var, lens: &[usize], batch: usize, index: usize) -> Result<Var> {
        let (rows, n) = as_matrix_dims(self.value(x));
        let seg: usize = lens.iter().sum();
        if seg * batch != n || index >= lens.len() || lens[index] == 0 {
            return Err(Error::Shape(format!("pick: lens {lens:?} x {batch} vs {n} tokens")));
        }
        let off: usize = lens[..index].iter().sum();
        let len = lens[index];
        let pc = len * batch;
        let src = self.value(x).data();
        let mut y = vec![0.0; rows * pc];
        for r in 0..rows {
            for b in 0..batch {
                let s = r * n + b * seg + off;
                y[r * pc + b * len..r * pc + (b + 1) * len].copy_from_slice(&src[s..s + len]);
            }
        }
        self.push(OpKind::Pick, Tensor::from_parts(vec![rows, pc], y), &[x], move |ctx| {
            let g = ctx.grad.data();
            let mut dx = vec![0.0; rows * n];
            for r in 0..rows {
                for b in 0..batch {
                    let s = r * n + b * seg + off;
                    dx[s..s + len].copy_from_slice(&g[r * pc + b * len..r * pc + (b + 1) * len]);
                }
            }
            vec![Some(Tensor::from_parts(vec![rows, n], dx))]
        })
    }

    /// Repeats a matrix `times` times along the token axis.
    pub fn tile_cols(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return shape_err("tile_cols: zero repeats");
        }
        let (rows, c) = as_matrix_dims(self.value(x));
        let src = self.value(x).data();
        let n = c * times;
        let mut y = Vec::with_capacity(rows * n);
        for r in 0..rows {
            for _ in 0..times {
                y.extend_from_slice(&src[r * c..(r + 1) * c]);
            }
        }
        self.push(OpKind::TileCols, Tensor::from_parts(vec![rows, n], y), &[x], move |ctx| {
            let g = ctx.grad.data();
            let mut dx = vec![0.0; rows * c];
            for r in 0..rows {
                for j in 0..n {
                    dx[r * c + j % c] += g[r * n + j];
                }
            }
            vec![Some(Tensor::from_parts(vec![rows, c], dx))]
        })
    }

    /// Stacks matrices with equal token counts along the feature axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = match parts.first() {
            Some(&p) => self.value(p).cols(),
            None => return shape_err("concat_rows: no parts"),
        };
        let mut rows = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return shape_err("concat_rows: token counts differ");
            }
            rows.push(t.rows());
            data.extend_from_slice(t.data());
        }
        let total: usize = rows.iter().sum();
        self.push(OpKind::ConcatRows, Tensor::from_parts(vec![total, n], data), parts, move |ctx| {
            let g = ctx.grad.data();
            let mut off = 0;
            rows.iter()
                .zip(&ctx.inputs)
                .map(|(&r, input)| {
                    let t = Tensor::from_parts(input.dims().to_vec(), g[off * n..(off + r) * n].to_vec());
                    off += r;
                    Some(t)
                })
                .collect()
        })
    }

    /// Mean over the tokens of each segment: `[D, B*T] -> [D, B]`.
    pub fn segment_mean(&mut self, x: Var, seg_len: usize) -> Result<Var> {
        let (d, n) = as_matrix_dims(self.value(x));
        check_segments(n, seg_len)?;
        let b = n / seg_len;
        let xv = self.value(x).data();
        let y = Tensor::from_fn(&[d, b], |i| {
            let (r, s) = (i / b, i % b);
            xv[r * n + s * seg_len..r * n + (s + 1) * seg_len].iter().sum::<f64>() / seg_len as f64
        });
        self.push(OpKind::SegmentMean, y, &[x], move |ctx| {
            let g = ctx.grad.data();
            vec![Some(Tensor::from_fn(&[d, n], |i| {
                let (r, c) = (i / n, i % n);
                g[r * b + c / seg_len] / seg_len as f64
            }))]
        })
    }

    /// `Σ w ⊙ x` for a constant weight tensor of the same size.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        if self.value(x).numel() != weights.numel() {
            return shape_err("weighted_sum: size mismatch");
        }
        let w = weights.clone();
        let s: f64 = self.value(x).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        self.push(OpKind::WeightedSum, Tensor::scalar(s), &[x], move |ctx| {
            let g = ctx.grad.item();
            vec![Some(Tensor::from_parts(ctx.inputs[0].dims().to_vec(), w.data().iter().map(|v| v * g).collect()))]
        })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ones = Tensor::full(self.dims(x), 1.0);
        self.weighted_sum(x, &ones)
    }
}
