//! Selective state space model: input-dependent step sizes and projections,
//! zero-order-hold discretization of a diagonal state matrix, and the linear
//! recurrence scan.
//!
//! For every channel `d` and state index `s` the recurrence is
//!
//! ```text
//! h[k] = Ā[k] · h[k-1] + B̄x[k]        Ā[k] = exp(Δ[d,k] · A[d,s])
//! y[d,k] = Σ_s C[s,k] · h[k] + D[d] · x[d,k]
//! ```
//!
//! with `A = -exp(a_log)` strictly negative and `Δ = softplus(·) > 0`, so
//! `Ā ∈ (0, 1)`. Two scans are provided: a plain left-to-right loop and a
//! chunked scan that composes the affine steps `h ↦ a·h + b` associatively.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, LinearMap};
use crate::ops::softplus;
use crate::param::{ParamId, ParamStore};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::{matmul, Tensor};

/// Chunk length of the blocked scan.
pub const SCAN_CHUNK: usize = 64;

/// How the input path `B̄` is discretized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InputDiscretization {
    /// `B̄ = Δ·B`.
    #[default]
    Euler,
    /// `B̄ = (exp(ΔA) - 1) / A · B`.
    Zoh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScanMode {
    Sequential,
    #[default]
    Fast,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsmOptions {
    pub input: InputDiscretization,
    pub scan: ScanMode,
}

impl Default for SsmOptions {
    fn default() -> Self {
        Self { input: InputDiscretization::Euler, scan: ScanMode::Fast }
    }
}

/// Parameters of one selective SSM over `dim` channels.
#[derive(Clone, Debug)]
pub struct SsmParams {
    /// `[D, d_state]`, stores `log(-A)`.
    pub a_log: ParamId,
    /// `[D]` skip weights.
    pub d_skip: ParamId,
    pub b_proj: LinearMap,
    pub c_proj: LinearMap,
    pub dt_low: LinearMap,
    /// `dt_rank -> D`; its bias is `dt_bias`.
    pub dt_up: LinearMap,
    pub dt_bias: ParamId,
}

impl SsmParams {
    /// S4D-real init `A[d, s] = -(s + 1)`, unit skip, and `dt_bias` chosen so
    /// the initial step `softplus(dt_bias)` is log-uniform in `[1e-3, 1e-1]`.
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, d_state: usize, dt_rank: usize) -> Self {
        assert!(d_state >= 1 && dt_rank >= 1, "d_state and dt_rank must be positive");
        let a_log =
            b.tensor(&format!("{name}.a_log"), Tensor::from_fn(&[dim, d_state], |i| ((i % d_state) as f64 + 1.0).ln()));
        let d_skip = b.tensor(&format!("{name}.d_skip"), Tensor::full(&[dim], 1.0));
        let b_proj = LinearMap::new(b, &format!("{name}.b_proj"), dim, d_state, false);
        let c_proj = LinearMap::new(b, &format!("{name}.c_proj"), dim, d_state, false);
        let dt_low = LinearMap::new(b, &format!("{name}.dt_low"), dim, dt_rank, false);
        let mut dt_up = LinearMap::new(b, &format!("{name}.dt_up"), dt_rank, dim, false);
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let bias: Vec<f64> = (0..dim)
            .map(|_| {
                let dt = b.rng.random_range(lo..hi).exp();
                // inverse softplus
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let dt_bias = b.tensor(&format!("{name}.dt_bias"), Tensor::from_parts(vec![dim], bias));
        dt_up.bias = Some(dt_bias);
        Self { a_log, d_skip, b_proj, c_proj, dt_low, dt_up, dt_bias }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.a_log, self.d_skip];
        v.extend(self.b_proj.params());
        v.extend(self.c_proj.params());
        v.extend(self.dt_low.params());
        v.extend(self.dt_up.params());
        v
    }

    pub fn dim(&self, store: &ParamStore) -> usize {
        store.value(self.d_skip).numel()
    }

    pub fn d_state(&self, store: &ParamStore) -> usize {
        store.value(self.a_log).dims()[1]
    }

    /// Sets every projection that feeds `Δ`, `B` and `C` to zero.
    pub fn zero_projections(&self, store: &mut ParamStore) {
        for l in [&self.b_proj, &self.c_proj, &self.dt_low] {
            for id in l.params() {
                store.value_mut(id).data_mut().fill(0.0);
            }
        }
        store.value_mut(self.dt_up.weight).data_mut().fill(0.0);
    }
}

/// Discretized system for one sequence of length `K`.
#[derive(Clone, Debug)]
pub struct Discretized {
    /// `[D, d_state, K]`
    pub abar: Tensor,
    /// `[D, d_state, K]`, the input term `B̄ x` of each step.
    pub bbar_x: Tensor,
    /// `[d_state, K]`
    pub c: Tensor,
    /// `[D]`
    pub d_skip: Tensor,
    /// `[D, K]` step sizes.
    pub delta: Tensor,
}

fn apply_linear(store: &ParamStore, l: &LinearMap, x: &Tensor) -> Tensor {
    let w = store.value(l.weight);
    let (out, inp) = (w.dims()[0], w.dims()[1]);
    let n = x.cols();
    let mut y = matmul(w.data(), x.data(), out, inp, n);
    if let Some(b) = l.bias {
        for (r, bv) in store.value(b).data().iter().enumerate() {
            y[r * n..(r + 1) * n].iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::from_parts(vec![out, n], y)
}

/// Computes `Δ`, `Ā`, `B̄x` and `C` for `x: [D, K]`.
pub fn discretize(store: &ParamStore, p: &SsmParams, x: &Tensor, input: InputDiscretization) -> Result<Discretized> {
    let dim = p.dim(store);
    let ds = p.d_state(store);
    if x.rank() != 2 || x.rows() != dim {
        return Err(Error::Shape(format!("ssm input {:?} for {dim} channels", x.dims())));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "discretize" });
    }
    let k = x.cols();
    let delta = apply_linear(store, &p.dt_up, &apply_linear(store, &p.dt_low, x)).map(softplus);
    if !delta.is_finite() || delta.data().iter().any(|&d| d < 0.0) {
        return Err(Error::NonFinite { op: "discretize" });
    }
    let bm = apply_linear(store, &p.b_proj, x);
    let c = apply_linear(store, &p.c_proj, x);
    let a_log = store.value(p.a_log);
    let mut abar = vec![0.0; dim * ds * k];
    let mut bbar_x = vec![0.0; dim * ds * k];
    for d in 0..dim {
        for s in 0..ds {
            let a = -a_log.at(d, s).exp();
            for t in 0..k {
                let dt = delta.at(d, t);
                let ab = (dt * a).exp();
                let bbar = match input {
                    InputDiscretization::Euler => dt * bm.at(s, t),
                    InputDiscretization::Zoh => (ab - 1.0) / a * bm.at(s, t),
                };
                abar[(d * ds + s) * k + t] = ab;
                bbar_x[(d * ds + s) * k + t] = bbar * x.at(d, t);
            }
        }
    }
    Ok(Discretized {
        abar: Tensor::from_parts(vec![dim, ds, k], abar),
        bbar_x: Tensor::from_parts(vec![dim, ds, k], bbar_x),
        c,
        d_skip: store.value(p.d_skip).clone(),
        delta,
    })
}

/// One affine step `h ↦ mul·h + add`; composition is associative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub mul: f64,
    pub add: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { mul: 1.0, add: 0.0 };

    /// `then ∘ self`: apply `self` first.
    pub fn then(self, next: Affine) -> Affine {
        Affine { mul: next.mul * self.mul, add: next.mul * self.add + next.add }
    }

    pub fn apply(self, h: f64) -> f64 {
        self.mul * h + self.add
    }
}

/// Left-to-right scan of one lane, `h[-1] = 0`.
pub fn scan_lane_sequential(a: &[f64], b: &[f64], h: &mut [f64]) {
    let mut state = 0.0;
    for ((hk, &ak), &bk) in h.iter_mut().zip(a).zip(b) {
        state = ak * state + bk;
        *hk = state;
    }
}

/// Blocked scan of one lane: each chunk is summarized as an [`Affine`], the
/// summaries are composed to get every chunk's incoming state, and each chunk
/// is then finished from its incoming state.
pub fn scan_lane_chunked(a: &[f64], b: &[f64], h: &mut [f64], chunk: usize) {
    let chunk = chunk.max(1);
    let mut incoming = 0.0;
    for ((ac, bc), hc) in a.chunks(chunk).zip(b.chunks(chunk)).zip(h.chunks_mut(chunk)) {
        let mut local = Affine::IDENTITY;
        for (hk, (&ak, &bk)) in hc.iter_mut().zip(ac.iter().zip(bc)) {
            local = local.then(Affine { mul: ak, add: bk });
            *hk = local.apply(incoming);
        }
        incoming = local.apply(incoming);
    }
}

fn scan_lane(a: &[f64], b: &[f64], h: &mut [f64], mode: ScanMode) {
    match mode {
        ScanMode::Sequential => scan_lane_sequential(a, b, h),
        ScanMode::Fast => scan_lane_chunked(a, b, h, SCAN_CHUNK),
    }
}

fn check_disc(disc: &Discretized, x: &Tensor) -> Result<(usize, usize, usize)> {
    let (dim, ds, k) = (disc.abar.dims()[0], disc.abar.dims()[1], disc.abar.dims()[2]);
    if x.dims() != [dim, k] || disc.bbar_x.dims() != disc.abar.dims() || disc.c.dims() != [ds, k] {
        return Err(Error::Shape("discretized system does not match input".into()));
    }
    Ok((dim, ds, k))
}

fn scan_discretized(disc: &Discretized, x: &Tensor, mode: ScanMode) -> Result<Tensor> {
    let (dim, ds, k) = check_disc(disc, x)?;
    let channel = |d: usize| {
        let mut y: Vec<f64> = (0..k).map(|t| disc.d_skip.data()[d] * x.at(d, t)).collect();
        let mut h = vec![0.0; k];
        for s in 0..ds {
            let lane = (d * ds + s) * k..(d * ds + s + 1) * k;
            scan_lane(&disc.abar.data()[lane.clone()], &disc.bbar_x.data()[lane], &mut h, mode);
            for (t, yt) in y.iter_mut().enumerate() {
                *yt += disc.c.at(s, t) * h[t];
            }
        }
        y
    };
    let rows: Vec<Vec<f64>> = match mode {
        ScanMode::Sequential => (0..dim).map(channel).collect(),
        ScanMode::Fast => (0..dim).into_par_iter().map(channel).collect(),
    };
    Ok(Tensor::from_parts(vec![dim, k], rows.concat()))
}

/// Reference scan: a plain loop over steps.
pub fn scan_sequential(disc: &Discretized, x: &Tensor) -> Result<Tensor> {
    scan_discretized(disc, x, ScanMode::Sequential)
}

/// Chunked associative scan, parallel over channels.
pub fn scan_fast(disc: &Discretized, x: &Tensor) -> Result<Tensor> {
    scan_discretized(disc, x, ScanMode::Fast)
}

/// Hidden states `[D, d_state, K]` of the reference scan.
pub fn hidden_states(disc: &Discretized) -> Tensor {
    let dims = disc.abar.dims().to_vec();
    let k = dims[2];
    let mut h = vec![0.0; disc.abar.numel()];
    for (lane, hl) in h.chunks_mut(k).enumerate() {
        let r = lane * k..(lane + 1) * k;
        scan_lane_sequential(&disc.abar.data()[r.clone()], &disc.bbar_x.data()[r], hl);
    }
    Tensor::from_parts(dims, h)
}

struct ScanShape {
    dim: usize,
    ds: usize,
    n: usize,
    seg_len: usize,
}

impl ScanShape {
    /// Step coefficients of lane `(d, s)`; `a` is zeroed at segment starts so
    /// the state resets there.
    fn lane(&self, d: usize, s: usize, inputs: &[&Tensor], opts: SsmOptions) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
        let (x, delta, a_log, bm) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let a = -a_log.at(d, s).exp();
        let n = self.n;
        let mut abar = Vec::with_capacity(n);
        let mut coef = Vec::with_capacity(n);
        let mut u = Vec::with_capacity(n);
        for t in 0..n {
            let dt = delta.data()[d * n + t];
            let ab = (dt * a).exp();
            let bx = bm.data()[s * n + t] * x.data()[d * n + t];
            let c = match opts.input {
                InputDiscretization::Euler => dt,
                InputDiscretization::Zoh => (ab - 1.0) / a,
            };
            abar.push(ab);
            coef.push(c);
            u.push(c * bx);
        }
        (a, abar, coef, u)
    }

    fn reset_mask(&self, abar: &[f64]) -> Vec<f64> {
        abar.iter().enumerate().map(|(t, &v)| if t % self.seg_len == 0 { 0.0 } else { v }).collect()
    }
}

impl Tape {
    /// Fused selective scan with `x, delta: [D, N]`, `a_log: [D, S]`,
    /// `b, c: [S, N]`, `d_skip: [D]`. Each `seg_len` block of tokens is an
    /// independent sequence starting from a zero state.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        a_log: Var,
        b: Var,
        c: Var,
        d_skip: Var,
        seg_len: usize,
        opts: SsmOptions,
    ) -> Result<Var> {
        let (dim, n) = (self.value(x).rows(), self.value(x).cols());
        let ds = self.value(a_log).cols();
        if self.dims(delta) != [dim, n]
            || self.dims(a_log) != [dim, ds]
            || self.dims(b) != [ds, n]
            || self.dims(c) != [ds, n]
            || self.dims(d_skip) != [dim]
        {
            return Err(Error::Shape("selective_scan: inconsistent operand dims".into()));
        }
        if seg_len == 0 || n % seg_len != 0 {
            return Err(Error::Shape(format!("selective_scan: {n} tokens vs segment {seg_len}")));
        }
        if self.value(delta).data().iter().any(|&v| v < 0.0 || v.is_nan()) {
            return Err(Error::NonFinite { op: "selective_scan" });
        }
        let shape = ScanShape { dim, ds, n, seg_len };
        let inputs: Vec<&Tensor> = [x, delta, a_log, b, c, d_skip].iter().map(|&v| self.value(v)).collect();
        let channel = |d: usize| {
            let (xv, cm, dsk) = (inputs[0], inputs[4], inputs[5]);
            let mut y: Vec<f64> = (0..n).map(|t| dsk.data()[d] * xv.data()[d * n + t]).collect();
            let mut h = vec![0.0; n];
            for s in 0..ds {
                let (_, abar, _, u) = shape.lane(d, s, &inputs, opts);
                scan_lane(&shape.reset_mask(&abar), &u, &mut h, opts.scan);
                for (t, yt) in y.iter_mut().enumerate() {
                    *yt += cm.data()[s * n + t] * h[t];
                }
            }
            y
        };
        let rows: Vec<Vec<f64>> = match opts.scan {
            ScanMode::Sequential => (0..dim).map(channel).collect(),
            ScanMode::Fast => (0..dim).into_par_iter().map(channel).collect(),
        };
        let out = Tensor::from_parts(vec![dim, n], rows.concat());
        self.push(OpKind::SelectiveScan, out, &[x, delta, a_log, b, c, d_skip], move |ctx| {
            scan_backward(&shape, &ctx.inputs, ctx.grad, opts)
        })
    }
}

fn scan_backward(shape: &ScanShape, inputs: &[&Tensor], dy: &Tensor, opts: SsmOptions) -> Vec<Option<Tensor>> {
    let ScanShape { dim, ds, n, seg_len } = *shape;
    let (xv, delta, bm, cm, dsk) = (inputs[0], inputs[1], inputs[3], inputs[4], inputs[5]);
    struct Partial {
        dx: Vec<f64>,
        ddelta: Vec<f64>,
        da_log: Vec<f64>,
        db: Vec<f64>,
        dc: Vec<f64>,
        dskip: f64,
    }
    let partials: Vec<Partial> = (0..dim)
        .into_par_iter()
        .map(|d| {
            let dyd = &dy.data()[d * n..(d + 1) * n];
            let xd = &xv.data()[d * n..(d + 1) * n];
            let mut p = Partial {
                dx: dyd.iter().map(|g| g * dsk.data()[d]).collect(),
                ddelta: vec![0.0; n],
                da_log: vec![0.0; ds],
                db: vec![0.0; ds * n],
                dc: vec![0.0; ds * n],
                dskip: dyd.iter().zip(xd).map(|(g, x)| g * x).sum(),
            };
            let mut h = vec![0.0; n];
            for s in 0..ds {
                let (a, abar, coef, u) = shape.lane(d, s, inputs, opts);
                scan_lane_sequential(&shape.reset_mask(&abar), &u, &mut h);
                let mut carry = 0.0;
                let mut da = 0.0;
                for t in (0..n).rev() {
                    let dh = cm.data()[s * n + t] * dyd[t] + carry;
                    p.dc[s * n + t] = dyd[t] * h[t];
                    let first = t % seg_len == 0;
                    let dabar = if first { 0.0 } else { dh * h[t - 1] };
                    carry = if first { 0.0 } else { abar[t] * dh };
                    let dt = delta.data()[d * n + t];
                    let b = bm.data()[s * n + t];
                    let bx = b * xd[t];
                    // u = coef * b * x
                    p.db[s * n + t] = dh * coef[t] * xd[t];
                    p.dx[t] += dh * coef[t] * b;
                    let (g_abar, g_a_direct) = match opts.input {
                        InputDiscretization::Euler => {
                            p.ddelta[t] += dh * bx;
                            (dabar, 0.0)
                        }
                        InputDiscretization::Zoh => {
                            let g = dabar + dh * bx / a;
                            (g, -dh * bx * (abar[t] - 1.0) / (a * a))
                        }
                    };
                    p.ddelta[t] += g_abar * abar[t] * a;
                    da += g_abar * abar[t] * dt + g_a_direct;
                }
                p.da_log[s] = da * a;
            }
            p
        })
        .collect();
    let mut dx = Vec::with_capacity(dim * n);
    let mut ddelta = Vec::with_capacity(dim * n);
    let mut da_log = Vec::with_capacity(dim * ds);
    let mut db = vec![0.0; ds * n];
    let mut dc = vec![0.0; ds * n];
    let mut dskip = Vec::with_capacity(dim);
    for p in partials {
        dx.extend(p.dx);
        ddelta.extend(p.ddelta);
        da_log.extend(p.da_log);
        for (acc, v) in db.iter_mut().zip(&p.db) {
            *acc += v;
        }
        for (acc, v) in dc.iter_mut().zip(&p.dc) {
            *acc += v;
        }
        dskip.push(p.dskip);
    }
    vec![
        Some(Tensor::from_parts(vec![dim, n], dx)),
        Some(Tensor::from_parts(vec![dim, n], ddelta)),
        Some(Tensor::from_parts(vec![dim, ds], da_log)),
        Some(Tensor::from_parts(vec![ds, n], db)),
        Some(Tensor::from_parts(vec![ds, n], dc)),
        Some(Tensor::from_parts(vec![dim], dskip)),
    ]
}

/// The SSM `Ω`: discretize from `x` and scan, differentiably.
pub fn ssm_apply(cx: &mut Ctx<'_>, p: &SsmParams, x: Var, seg_len: usize, opts: SsmOptions) -> Result<Var> {
    let low = p.dt_low.forward(cx, x)?;
    let pre = p.dt_up.forward(cx, low)?;
    let delta = cx.tape.softplus(pre)?;
    let b = p.b_proj.forward(cx, x)?;
    let c = p.c_proj.forward(cx, x)?;
    let a_log = cx.param(p.a_log);
    let d_skip = cx.param(p.d_skip);
    cx.tape.selective_scan(x, delta, a_log, b, c, d_skip, seg_len, opts)
}

/// Multiply-adds of the selective SSM core over `k` tokens: the `Δ`, `B`, `C`
/// projections, discretization, the recurrence and the output/skip paths.
pub fn ssm_flops(dim: usize, k: usize, d_state: usize, dt_rank: usize) -> u64 {
    let (d, k, s, r) = (dim as u64, k as u64, d_state as u64, dt_rank as u64);
    k * (2 * d * r + 6 * d * s + d)
}

/// Multiply-adds of softmax self-attention over `k` tokens, excluding the
/// q/k/v/o projections: the `K²·D` score product and the `K²·D` value mix.
pub fn attention_flops(dim: usize, k: usize) -> u64 {
    let (d, k) = (dim as u64, k as u64);
    2 * k * k * d
}

/// Smallest sequence length at which the SSM core is cheaper than attention.
pub fn flops_crossover(dim: usize, d_state: usize, dt_rank: usize) -> usize {
    (1..).find(|&k| ssm_flops(dim, k, d_state, dt_rank) < attention_flops(dim, k)).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, FD_STEP};
    use crate::param::ParamKind;
    use crate::testutil::rng;
    use proptest::prelude::*;

    fn build(dim: usize, ds: usize, rank: usize, seed: u64) -> (ParamStore, SsmParams) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let p = SsmParams::new(&mut Builder::new(&mut store, &mut r, ParamKind::Trainable), "ssm", dim, ds, rank);
        (store, p)
    }

    /// Random but well-conditioned parameters for oracle comparisons.
    fn randomize(store: &mut ParamStore, p: &SsmParams, seed: u64) {
        let mut r = rng(seed);
        for id in p.params() {
            let dims = store.value(id).dims().to_vec();
            let t = Tensor::randn(&dims, 0.5, &mut r);
            store.set_value(id, t).unwrap();
        }
    }

    fn disc_from(abar: &[f64], bx: &[f64], c: &[f64], dskip: f64) -> Discretized {
        let k = abar.len();
        Discretized {
            abar: Tensor::new(vec![1, 1, k], abar.to_vec()).unwrap(),
            bbar_x: Tensor::new(vec![1, 1, k], bx.to_vec()).unwrap(),
            c: Tensor::new(vec![1, k], c.to_vec()).unwrap(),
            d_skip: Tensor::vector(&[dskip]).unwrap(),
            delta: Tensor::full(&[1, k], 1.0),
        }
    }

    #[test]
    fn half_decay_from_ln2_step() {
        let (mut store, p) = build(1, 1, 1, 1);
        p.zero_projections(&mut store);
        store.set_value(p.dt_bias, Tensor::vector(&[0.0]).unwrap()).unwrap();
        store.set_value(p.a_log, Tensor::new(vec![1, 1], vec![0.0]).unwrap()).unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.4, -1.0, 2.0]).unwrap();
        let disc = discretize(&store, &p, &x, InputDiscretization::Euler).unwrap();
        for t in 0..3 {
            assert!((disc.delta.at(0, t) - std::f64::consts::LN_2).abs() < 1e-15);
            assert!((disc.abar.data()[t] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn vanishing_step_gives_identity_memory() {
        let (mut store, p) = build(1, 2, 1, 2);
        p.zero_projections(&mut store);
        store.set_value(p.dt_bias, Tensor::vector(&[-60.0]).unwrap()).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let disc = discretize(&store, &p, &x, InputDiscretization::Euler).unwrap();
        assert!(disc.abar.data().iter().all(|a| (a - 1.0).abs() < 1e-20));
        assert!(disc.bbar_x.data().iter().all(|b| b.abs() < 1e-20));
    }

    #[test]
    fn random_params_give_contracting_abar() {
        let (mut store, p) = build(2, 4, 2, 3);
        randomize(&mut store, &p, 30);
        let x = Tensor::randn(&[2, 3], 1.0, &mut rng(31));
        for input in [InputDiscretization::Euler, InputDiscretization::Zoh] {
            let disc = discretize(&store, &p, &x, input).unwrap();
            assert!(disc.abar.data().iter().all(|&a| a > 0.0 && a < 1.0));
        }
    }

    #[test]
    fn hand_unrolled_recurrence() {
        let disc = disc_from(&[0.5; 3], &[1.0; 3], &[1.0; 3], 0.0);
        let x = Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap();
        let y = scan_sequential(&disc, &x).unwrap();
        assert_eq!(y.data(), &[1.0, 1.5, 1.75]);
        assert_eq!(hidden_states(&disc).data(), &[1.0, 1.5, 1.75]);
        assert_eq!(scan_fast(&disc, &x).unwrap().data(), &[1.0, 1.5, 1.75]);
    }

    #[test]
    fn memoryless_limit() {
        let bx = [0.3, -2.0, 5.0];
        let c = [2.0, 0.5, -1.0];
        let disc = disc_from(&[0.0; 3], &bx, &c, 0.7);
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = scan_sequential(&disc, &x).unwrap();
        for t in 0..3 {
            assert!((y.data()[t] - (c[t] * bx[t] + 0.7 * x.data()[t])).abs() < 1e-15);
        }
    }

    #[test]
    fn single_step_is_affine() {
        let (mut store, p) = build(3, 4, 2, 4);
        randomize(&mut store, &p, 40);
        let x = Tensor::randn(&[3, 1], 1.0, &mut rng(41));
        let disc = discretize(&store, &p, &x, InputDiscretization::Euler).unwrap();
        let seq = scan_sequential(&disc, &x).unwrap();
        assert_eq!(seq, scan_fast(&disc, &x).unwrap());
        for d in 0..3 {
            let expect: f64 = (0..4).map(|s| disc.c.at(s, 0) * disc.bbar_x.data()[d * 4 + s]).sum::<f64>()
                + disc.d_skip.data()[d] * x.at(d, 0);
            assert!((seq.at(d, 0) - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn fast_matches_sequential_on_long_input() {
        let (mut store, p) = build(4, 8, 3, 5);
        randomize(&mut store, &p, 50);
        let x = Tensor::randn(&[4, 64 * 3 + 7], 1.0, &mut rng(51));
        let disc = discretize(&store, &p, &x, InputDiscretization::Euler).unwrap();
        let a = scan_sequential(&disc, &x).unwrap();
        let b = scan_fast(&disc, &x).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn tape_scan_agrees_with_discretized_route() {
        let (mut store, p) = build(3, 5, 2, 6);
        randomize(&mut store, &p, 60);
        let x = Tensor::randn(&[3, 9], 1.0, &mut rng(61));
        for input in [InputDiscretization::Euler, InputDiscretization::Zoh] {
            let disc = discretize(&store, &p, &x, input).unwrap();
            let reference = scan_sequential(&disc, &x).unwrap();
            for scan in [ScanMode::Sequential, ScanMode::Fast] {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let mut cx = Ctx::new(&mut tape, &store, false);
                let y = ssm_apply(&mut cx, &p, xv, 9, SsmOptions { input, scan }).unwrap();
                assert!(cx.value(y).max_abs_diff(&reference) < 1e-12);
            }
        }
    }

    #[test]
    fn segments_are_independent() {
        let (mut store, p) = build(2, 3, 2, 7);
        randomize(&mut store, &p, 70);
        let a = Tensor::randn(&[2, 5], 1.0, &mut rng(71));
        let b = Tensor::randn(&[2, 5], 1.0, &mut rng(72));
        let both = Tensor::concat_cols(&[&a, &b]).unwrap();
        let run = |x: &Tensor, seg: usize| {
            let mut tape = Tape::no_grad();
            let xv = tape.constant(x.clone());
            let mut cx = Ctx::new(&mut tape, &store, false);
            let y = ssm_apply(&mut cx, &p, xv, seg, SsmOptions::default()).unwrap();
            cx.value(y).clone()
        };
        let joint = run(&both, 5);
        assert!(joint.slice_cols(0, 5).max_abs_diff(&run(&a, 5)) < 1e-14);
        assert!(joint.slice_cols(5, 5).max_abs_diff(&run(&b, 5)) < 1e-14);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let (store, p) = build(4, 3, 2, 8);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 6]));
        let mut cx = Ctx::new(&mut tape, &store, false);
        let y = ssm_apply(&mut cx, &p, x, 6, SsmOptions::default()).unwrap();
        assert_eq!(cx.value(y).dims(), &[4, 6]);
        assert!(cx.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences_for_every_group() {
        for input in [InputDiscretization::Euler, InputDiscretization::Zoh] {
            let (mut store, p) = build(2, 3, 2, 9);
            randomize(&mut store, &p, 90);
            let x = Tensor::randn(&[2, 8], 1.0, &mut rng(91));
            let ids = p.params();
            for scan in [ScanMode::Sequential, ScanMode::Fast] {
                let opts = SsmOptions { input, scan };
                let err = check_params(&mut store, &ids, FD_STEP, |tape, store| {
                    let xv = tape.constant(x.clone());
                    let mut cx = Ctx::new(tape, store, true);
                    ssm_apply(&mut cx, &p, xv, 4, opts)
                })
                .unwrap();
                assert!(err < 1e-4, "{input:?}/{scan:?}: {err}");
            }
            let err = crate::gradcheck::check_inputs(std::slice::from_ref(&x), FD_STEP, |tape, v| {
                let mut cx = Ctx::new(tape, &store, true);
                ssm_apply(&mut cx, &p, v[0], 8, SsmOptions { input, scan: ScanMode::Fast })
            })
            .unwrap();
            assert!(err < 1e-4, "input grad {input:?}: {err}");
        }
    }

    #[test]
    fn long_sequence_state_stays_bounded() {
        let (mut store, p) = build(2, 4, 2, 10);
        randomize(&mut store, &p, 100);
        let x = Tensor::randn(&[2, 4096], 1.0, &mut rng(101));
        let disc = discretize(&store, &p, &x, InputDiscretization::Euler).unwrap();
        let h = hidden_states(&disc);
        let amax = disc.abar.data().iter().fold(0.0f64, |m, &a| m.max(a));
        let bmax = disc.bbar_x.max_abs();
        assert!(amax < 1.0);
        let bound = bmax / (1.0 - amax);
        assert!(h.is_finite());
        assert!(h.max_abs() <= bound * (1.0 + 1e-12));
        assert!(scan_fast(&disc, &x).unwrap().is_finite());
    }

    #[test]
    fn flops_counts() {
        for k in [256, 512, 4096] {
            let r = ssm_flops(64, k, 16, 32) as f64 / ssm_flops(64, 2 * k, 16, 32) as f64;
            assert!((0.48..=0.52).contains(&r));
        }
        let r = attention_flops(64, 8192) as f64 / attention_flops(64, 4096) as f64;
        assert!((r - 4.0).abs() < 1e-9);
        let k = flops_crossover(64, 16, 32);
        assert!(ssm_flops(64, k, 16, 32) < attention_flops(64, k));
        assert!(ssm_flops(64, k - 1, 16, 32) >= attention_flops(64, k - 1));
    }

    proptest! {
        #[test]
        fn affine_composition_is_associative(
            a in prop::collection::vec((0.0f64..1.0, -3.0f64..3.0), 3),
            h in -5.0f64..5.0,
        ) {
            let [p, q, r] = [a[0], a[1], a[2]].map(|(m, b)| Affine { mul: m, add: b });
            let left = p.then(q).then(r).apply(h);
            let right = p.then(q.then(r)).apply(h);
            prop_assert!((left - right).abs() < 1e-12);
            prop_assert!((left - r.apply(q.apply(p.apply(h)))).abs() < 1e-12);
        }

        #[test]
        fn chunked_lane_scan_matches_loop(
            lane in prop::collection::vec((0.0f64..1.0, -2.0f64..2.0), 1..300),
            chunk in 1usize..80,
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = lane.into_iter().unzip();
            let mut h1 = vec![0.0; a.len()];
            let mut h2 = vec![0.0; a.len()];
            scan_lane_sequential(&a, &b, &mut h1);
            scan_lane_chunked(&a, &b, &mut h2, chunk);
            for (x, y) in h1.iter().zip(&h2) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
