//! Mamba aggregation: gated selective scans within each modality, then one
//! scan over the concatenated `[n, r, t]` patch sequence of every sample, and
//! the final per-modality head.

use rand::Rng;

use crate::backbone::{Modality, ModalityTokens};
use crate::error::{shape_err, Result};
use crate::nn::{BatchNorm, Builder, Ctx, DwConv, LayerNorm, LinearMap, Mhsa};
use crate::ops::Padding;
use crate::param::{ParamId, ParamStore};
use crate::ssm::{attention_flops, ssm_apply, ssm_flops, SsmOptions, SsmParams};
use crate::tape::Var;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaConfig {
    pub blocks: usize,
    pub intra: bool,
    pub inter: bool,
    pub d_state: usize,
    pub dt_rank: usize,
    pub conv_kernel: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub ln_eps: f64,
    pub ssm: SsmOptions,
}

impl Default for MaConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            intra: true,
            inter: true,
            d_state: 16,
            dt_rank: 32,
            conv_kernel: 3,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            ln_eps: 1e-5,
            ssm: SsmOptions::default(),
        }
    }
}

/// Parameters of `Θ(x) = silu(bn(dwconv(ξ(x))))` and `Ψ(x) = silu(ξ(x))`.
#[derive(Clone, Debug)]
pub struct Gates {
    pub theta_in: LinearMap,
    pub conv: DwConv,
    pub bn: BatchNorm,
    pub psi_in: LinearMap,
}

impl Gates {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, cfg: &MaConfig) -> Self {
        Self {
            theta_in: LinearMap::new(b, &format!("{name}.theta_in"), dim, dim, true),
            conv: DwConv::new(b, &format!("{name}.conv"), dim, cfg.conv_kernel, Padding::Same),
            bn: BatchNorm::new(b, &format!("{name}.bn"), dim, cfg.bn_eps, cfg.bn_momentum),
            psi_in: LinearMap::new(b, &format!("{name}.psi_in"), dim, dim, true),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.theta_in.params();
        v.push(self.conv.kernels);
        v.extend(self.bn.params());
        v.extend(self.psi_in.params());
        v
    }
}

pub fn theta(cx: &mut Ctx<'_>, g: &Gates, x: Var, seg_len: usize) -> Result<Var> {
    let h = g.theta_in.forward(cx, x)?;
    let h = g.conv.forward(cx, h, seg_len)?;
    let h = g.bn.forward(cx, h)?;
    cx.tape.silu(h)
}

pub fn psi(cx: &mut Ctx<'_>, g: &Gates, x: Var) -> Result<Var> {
    let h = g.psi_in.forward(cx, x)?;
    cx.tape.silu(h)
}

#[derive(Clone, Debug)]
pub struct IntraStage {
    pub gates: [Gates; 3],
    pub ssm: [SsmParams; 3],
    pub merge: LinearMap,
}

#[derive(Clone, Debug)]
pub struct InterStage {
    pub gates: [Gates; 3],
    pub ssm: SsmParams,
    pub merge: LinearMap,
}

#[derive(Clone, Debug)]
pub struct MaBlock {
    pub intra: Option<IntraStage>,
    pub inter: Option<InterStage>,
}

impl MaBlock {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, cfg: &MaConfig) -> Self {
        let intra = cfg.intra.then(|| IntraStage {
            gates: Modality::ALL.map(|m| Gates::new(b, &format!("{name}.intra.{}", m.name()), dim, cfg)),
            ssm: Modality::ALL
                .map(|m| SsmParams::new(b, &format!("{name}.intra.{}.ssm", m.name()), dim, cfg.d_state, cfg.dt_rank)),
            merge: LinearMap::new(b, &format!("{name}.intra.merge"), dim, dim, true),
        });
        let inter = cfg.inter.then(|| InterStage {
            gates: Modality::ALL.map(|m| Gates::new(b, &format!("{name}.inter.{}", m.name()), dim, cfg)),
            ssm: SsmParams::new(b, &format!("{name}.inter.ssm"), dim, cfg.d_state, cfg.dt_rank),
            merge: LinearMap::new(b, &format!("{name}.inter.merge"), dim, dim, true),
        });
        Self { intra, inter }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        if let Some(s) = &self.intra {
            v.extend(s.gates.iter().flat_map(|g| g.params()));
            v.extend(s.ssm.iter().flat_map(|p| p.params()));
            v.extend(s.merge.params());
        }
        if let Some(s) = &self.inter {
            v.extend(s.gates.iter().flat_map(|g| g.params()));
            v.extend(s.ssm.params());
            v.extend(s.merge.params());
        }
        v
    }
}

fn check_parts(cx: &Ctx<'_>, f: &[Var; 3], batch: usize) -> Result<usize> {
    let dims = cx.value(f[0]).dims().to_vec();
    if f.iter().any(|&v| cx.value(v).dims() != dims.as_slice()) {
        return shape_err("mamba aggregation: modality patch sets differ in shape");
    }
    if batch == 0 || !dims[1].is_multiple_of(batch) {
        return shape_err(format!("mamba aggregation: {} tokens for batch {batch}", dims[1]));
    }
    Ok(dims[1] / batch)
}

/// Gated per-modality scans `Ω(Θ(f)) ⊙ Ψ(f)` before the merge.
pub fn intra_gated(
    cx: &mut Ctx<'_>,
    stage: &IntraStage,
    f: &[Var; 3],
    n_pa: usize,
    opts: SsmOptions,
) -> Result<[Var; 3]> {
    let mut out = Vec::with_capacity(3);
    for m in 0..3 {
        let t = theta(cx, &stage.gates[m], f[m], n_pa)?;
        let s = ssm_apply(cx, &stage.ssm[m], t, n_pa, opts)?;
        let p = psi(cx, &stage.gates[m], f[m])?;
        out.push(cx.tape.mul(s, p)?);
    }
    Ok([out[0], out[1], out[2]])
}

/// Intra-modality aggregation; each input is `[D, batch * N_pa]`.
pub fn intra_ma(
    cx: &mut Ctx<'_>,
    stage: &IntraStage,
    f: &[Var; 3],
    batch: usize,
    opts: SsmOptions,
) -> Result<[Var; 3]> {
    let n_pa = check_parts(cx, f, batch)?;
    let gated = intra_gated(cx, stage, f, n_pa, opts)?;
    let cat = cx.tape.interleave(&gated, batch)?;
    let merged = stage.merge.forward(cx, cat)?;
    let raw = cx.tape.interleave(f, batch)?;
    let y = cx.tape.add(merged, raw)?;
    split(cx, y, n_pa, batch)
}

fn split(cx: &mut Ctx<'_>, y: Var, n_pa: usize, batch: usize) -> Result<[Var; 3]> {
    let lens = [n_pa; 3];
    Ok([cx.tape.pick(y, &lens, batch, 0)?, cx.tape.pick(y, &lens, batch, 1)?, cx.tape.pick(y, &lens, batch, 2)?])
}

/// Inter-modality aggregation: one scan runs across the `[n, r, t]`
/// concatenation of each sample.
pub fn inter_ma(
    cx: &mut Ctx<'_>,
    stage: &InterStage,
    f: &[Var; 3],
    batch: usize,
    opts: SsmOptions,
) -> Result<[Var; 3]> {
    let n_pa = check_parts(cx, f, batch)?;
    let mut thetas = Vec::with_capacity(3);
    let mut psis = Vec::with_capacity(3);
    for m in 0..3 {
        thetas.push(theta(cx, &stage.gates[m], f[m], n_pa)?);
        psis.push(psi(cx, &stage.gates[m], f[m])?);
    }
    let seq = cx.tape.interleave(&thetas, batch)?;
    let s = ssm_apply(cx, &stage.ssm, seq, 3 * n_pa, opts)?;
    let gate = cx.tape.interleave(&psis, batch)?;
    let g = cx.tape.mul(s, gate)?;
    let merged = stage.merge.forward(cx, g)?;
    let raw = cx.tape.interleave(f, batch)?;
    let y = cx.tape.add(merged, raw)?;
    split(cx, y, n_pa, batch)
}

#[derive(Clone, Debug)]
pub struct FinalHead {
    /// Shared over modalities, width `2D`.
    pub ln: LayerNorm,
    pub reduce: [LinearMap; 3],
}

impl FinalHead {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, dim: usize, ln_eps: f64) -> Self {
        Self {
            ln: LayerNorm::new(b, "ma.head.ln", 2 * dim, ln_eps),
            reduce: Modality::ALL
                .map(|m| LinearMap::new(b, &format!("ma.head.reduce.{}", m.name()), 2 * dim, dim, true)),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.ln.params();
        v.extend(self.reduce.iter().flat_map(|l| l.params()));
        v
    }
}

#[derive(Clone, Debug)]
pub struct MaStack {
    pub config: MaConfig,
    pub blocks: Vec<MaBlock>,
    pub head: FinalHead,
}

impl MaStack {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, dim: usize, config: MaConfig) -> Self {
        let blocks = (0..config.blocks).map(|i| MaBlock::new(b, &format!("ma.block{i}"), dim, &config)).collect();
        Self { config, blocks, head: FinalHead::new(b, dim, config.ln_eps) }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.blocks.iter().flat_map(|b| b.params()).collect();
        v.extend(self.head.params());
        v
    }

    /// Zeroes the merge maps of every block so each stage is a pure residual.
    pub fn zero_merges(&self, store: &mut ParamStore) {
        for b in &self.blocks {
            let merges = b.intra.iter().map(|s| &s.merge).chain(b.inter.iter().map(|s| &s.merge));
            for m in merges {
                for id in m.params() {
                    store.value_mut(id).data_mut().fill(0.0);
                }
            }
        }
    }
}

/// Runs one block, intra stage first.
pub fn ma_block(cx: &mut Ctx<'_>, block: &MaBlock, f: [Var; 3], batch: usize, opts: SsmOptions) -> Result<[Var; 3]> {
    let mut f = f;
    if let Some(s) = &block.intra {
        f = intra_ma(cx, s, &f, batch, opts)?;
    }
    if let Some(s) = &block.inter {
        f = inter_ma(cx, s, &f, batch, opts)?;
    }
    Ok(f)
}

/// Patch tokens through every block, then per modality
/// `reduce(LN([cls, mean(patches)]))`, concatenated to `[3D, batch]`.
pub fn ma_stack(cx: &mut Ctx<'_>, stack: &MaStack, tokens: &[ModalityTokens; 3]) -> Result<Var> {
    if stack.blocks.is_empty() {
        return shape_err("ma_stack: no blocks");
    }
    let batch = tokens[0].batch;
    let n_pa = tokens[0].n_patches;
    let mut cls = Vec::with_capacity(3);
    let mut f = Vec::with_capacity(3);
    for t in tokens {
        cls.push(t.cls(cx)?);
        f.push(t.patches(cx)?);
    }
    let mut f = [f[0], f[1], f[2]];
    for block in &stack.blocks {
        f = ma_block(cx, block, f, batch, stack.config.ssm)?;
    }
    let mut finals = Vec::with_capacity(3);
    for m in 0..3 {
        let mean = cx.tape.segment_mean(f[m], n_pa)?;
        let c = cx.tape.concat_rows(&[cls[m], mean])?;
        let c = stack.head.ln.forward(cx, c)?;
        finals.push(stack.head.reduce[m].forward(cx, c)?);
    }
    cx.tape.concat_rows(&finals)
}

/// Pre-norm residual self-attention over the concatenated `[n, r, t]` patch
/// sequence; the quadratic reference for the scaling benchmark.
#[derive(Clone, Debug)]
pub struct AttentionBaseline {
    pub ln: LayerNorm,
    pub attn: Mhsa,
}

impl AttentionBaseline {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, dim: usize, heads: usize, ln_eps: f64) -> Self {
        Self { ln: LayerNorm::new(b, "attn_base.ln", dim, ln_eps), attn: Mhsa::new(b, "attn_base.attn", dim, heads) }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, f: &[Var; 3], batch: usize) -> Result<[Var; 3]> {
        let n_pa = check_parts(cx, f, batch)?;
        let x = cx.tape.interleave(f, batch)?;
        let h = self.ln.forward(cx, x)?;
        let h = self.attn.forward(cx, h, 3 * n_pa)?;
        let y = cx.tape.add(h, x)?;
        split(cx, y, n_pa, batch)
    }
}

/// Multiply-adds of one MA block forward on one sample.
pub fn ma_block_flops(dim: usize, n_pa: usize, d_state: usize, dt_rank: usize, kernel: usize) -> u64 {
    let d = dim as u64;
    let stage = |k: usize| 3 * k as u64 * d * d + kernel as u64 * k as u64 * d;
    let intra = 3 * (ssm_flops(dim, n_pa, d_state, dt_rank) + stage(n_pa));
    let inter = ssm_flops(dim, 3 * n_pa, d_state, dt_rank) + stage(3 * n_pa);
    intra + inter
}

/// Multiply-adds of the attention baseline on one sample.
pub fn attention_block_flops(dim: usize, n_pa: usize) -> u64 {
    let k = 3 * n_pa as u64;
    attention_flops(dim, 3 * n_pa) + 4 * k * (dim as u64).pow(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{silu_value, softplus};
    use crate::param::ParamKind;
    use crate::ssm::ScanMode;
    use crate::tape::Tape;
    use crate::tensor::Tensor;
    use crate::testutil::rng;

    fn small_cfg() -> MaConfig {
        MaConfig { blocks: 1, d_state: 3, dt_rank: 2, ..MaConfig::default() }
    }

    fn build(dim: usize, cfg: MaConfig, seed: u64) -> (ParamStore, MaStack) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let s = MaStack::new(&mut Builder::new(&mut store, &mut r, ParamKind::Trainable), dim, cfg);
        (store, s)
    }

    fn set(store: &mut ParamStore, id: ParamId, v: &[f64]) {
        let dims = store.value(id).dims().to_vec();
        store.set_value(id, Tensor::new(dims, v.to_vec()).unwrap()).unwrap();
    }

    #[test]
    fn gates_fix_origin_and_reduce_to_silu() {
        let (mut store, stack) = build(3, small_cfg(), 1);
        let g = stack.blocks[0].intra.as_ref().unwrap().gates[0].clone();
        for id in [g.theta_in.bias.unwrap(), g.psi_in.bias.unwrap()] {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[3, 4]));
        let mut cx = Ctx::new(&mut tape, &store, false);
        let t = theta(&mut cx, &g, z, 4).unwrap();
        let p = psi(&mut cx, &g, z).unwrap();
        assert!(cx.value(t).data().iter().all(|v| *v == 0.0));
        assert!(cx.value(p).data().iter().all(|v| *v == 0.0));

        set(&mut store, g.psi_in.weight, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng(2));
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut cx = Ctx::new(&mut tape, &store, true);
        let p = psi(&mut cx, &g, xv).unwrap();
        assert!(cx.value(p).max_abs_diff(&x.map(silu_value)) < 1e-15);
        let t = theta(&mut cx, &g, xv, 4).unwrap();
        assert_eq!(cx.value(t).dims(), &[3, 4]);
    }

    /// Every scalar of the intra stage for D=1, d_state=1, N_pa=2 written out
    /// by hand.
    #[test]
    fn intra_hand_trace() {
        let cfg = MaConfig { blocks: 1, d_state: 1, dt_rank: 1, inter: false, ..MaConfig::default() };
        let (mut store, stack) = build(1, cfg, 3);
        let stage = stack.blocks[0].intra.clone().unwrap();
        let (wt, bt, k, gain, shift, wp, bp) = (0.8, 0.1, [0.5, 1.0, -0.25], 1.5, 0.2, -0.6, 0.3);
        let (wl, wu, dtb, wb, wc, alog, dskip) = (0.7, 1.2, -0.4, 0.9, -1.1, 0.3, 0.5);
        let (wm, bm) = (1.3, -0.05);
        for m in 0..3 {
            let g = &stage.gates[m];
            set(&mut store, g.theta_in.weight, &[wt]);
            set(&mut store, g.theta_in.bias.unwrap(), &[bt]);
            set(&mut store, g.conv.kernels, &k);
            set(&mut store, g.bn.gain, &[gain]);
            set(&mut store, g.bn.shift, &[shift]);
            set(&mut store, g.psi_in.weight, &[wp]);
            set(&mut store, g.psi_in.bias.unwrap(), &[bp]);
            let s = &stage.ssm[m];
            set(&mut store, s.dt_low.weight, &[wl]);
            set(&mut store, s.dt_up.weight, &[wu]);
            set(&mut store, s.dt_bias, &[dtb]);
            set(&mut store, s.b_proj.weight, &[wb]);
            set(&mut store, s.c_proj.weight, &[wc]);
            set(&mut store, s.a_log, &[alog]);
            set(&mut store, s.d_skip, &[dskip]);
        }
        set(&mut store, stage.merge.weight, &[wm]);
        set(&mut store, stage.merge.bias.unwrap(), &[bm]);

        let inputs = [[0.4, -1.3], [2.0, 0.1], [-0.7, -0.2]];
        let expect = |x: [f64; 2]| -> [f64; 2] {
            let l = [wt * x[0] + bt, wt * x[1] + bt];
            let c = [k[1] * l[0] + k[2] * l[1], k[0] * l[0] + k[1] * l[1]];
            let mu = (c[0] + c[1]) / 2.0;
            let var = ((c[0] - mu).powi(2) + (c[1] - mu).powi(2)) / 2.0;
            let u = c.map(|v| silu_value(gain * (v - mu) / (var + 1e-5).sqrt() + shift));
            let dt = u.map(|v| softplus(wu * (wl * v) + dtb));
            let a = -f64::exp(alog);
            let h0 = dt[0] * (wb * u[0]) * u[0];
            let h1 = (dt[1] * a).exp() * h0 + dt[1] * (wb * u[1]) * u[1];
            let y = [(wc * u[0]) * h0 + dskip * u[0], (wc * u[1]) * h1 + dskip * u[1]];
            let g = x.map(|v| silu_value(wp * v + bp));
            [wm * y[0] * g[0] + bm + x[0], wm * y[1] * g[1] + bm + x[1]]
        };
        for scan in [ScanMode::Sequential, ScanMode::Fast] {
            let mut tape = Tape::new();
            let f = inputs.map(|x| tape.constant(Tensor::new(vec![1, 2], x.to_vec()).unwrap()));
            let mut cx = Ctx::new(&mut tape, &store, true);
            let opts = SsmOptions { scan, ..SsmOptions::default() };
            let out = intra_ma(&mut cx, &stage, &f, 1, opts).unwrap();
            for m in 0..3 {
                let e = expect(inputs[m]);
                for t in 0..2 {
                    assert!((cx.value(out[m]).data()[t] - e[t]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zeroed_merge_is_pure_residual() {
        let (mut store, stack) = build(4, small_cfg(), 4);
        stack.zero_merges(&mut store);
        let f = [0, 1, 2].map(|i| Tensor::randn(&[4, 6], 1.0, &mut rng(40 + i)));
        let mut tape = Tape::new();
        let fv = f.clone().map(|t| tape.constant(t));
        let mut cx = Ctx::new(&mut tape, &store, true);
        let out = ma_block(&mut cx, &stack.blocks[0], fv, 2, SsmOptions::default()).unwrap();
        for m in 0..3 {
            assert_eq!(cx.value(out[m]), &f[m]);
        }
    }

    #[test]
    fn intra_scan_sees_only_its_modality() {
        let (store, stack) = build(4, small_cfg(), 5);
        let stage = stack.blocks[0].intra.clone().unwrap();
        let n = Tensor::randn(&[4, 5], 1.0, &mut rng(50));
        let other = Tensor::randn(&[4, 5], 1.0, &mut rng(51));
        let run = |r: &Tensor, t: &Tensor| {
            let mut tape = Tape::new();
            let f = [n.clone(), r.clone(), t.clone()].map(|x| tape.constant(x));
            let mut cx = Ctx::new(&mut tape, &store, true);
            let g = intra_gated(&mut cx, &stage, &f, 5, SsmOptions::default()).unwrap();
            cx.value(g[0]).clone()
        };
        let zero = Tensor::zeros(&[4, 5]);
        assert_eq!(run(&other, &other), run(&zero, &zero));
    }

    fn run_inter(store: &ParamStore, stage: &InterStage, f: &[Tensor; 3]) -> [Tensor; 3] {
        let mut tape = Tape::new();
        let fv = f.clone().map(|t| tape.constant(t));
        let mut cx = Ctx::new(&mut tape, store, true);
        let out = inter_ma(&mut cx, stage, &fv, 1, SsmOptions::default()).unwrap();
        out.map(|v| cx.value(v).clone())
    }

    #[test]
    fn inter_scan_crosses_modalities() {
        let (store, stack) = build(4, small_cfg(), 6);
        let stage = stack.blocks[0].inter.clone().unwrap();
        let f = [0, 1, 2].map(|i| Tensor::randn(&[4, 5], 1.0, &mut rng(60 + i)));
        let base = run_inter(&store, &stage, &f);
        let mut probe = f.clone();
        probe[0].data_mut()[2] += 1e-3;
        let moved = run_inter(&store, &stage, &probe);
        assert!(moved[2].max_abs_diff(&base[2]) > 1e-9);
        for t in [&base[0], &base[1], &base[2]] {
            assert_eq!(t.dims(), &[4, 5]);
        }
    }

    #[test]
    fn inter_memoryless_limit_is_tokenwise() {
        let (mut store, stack) = build(2, small_cfg(), 7);
        let stage = stack.blocks[0].inter.clone().unwrap();
        for g in &stage.gates {
            store.value_mut(g.conv.kernels).data_mut().copy_from_slice(&[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        }
        store.value_mut(stage.ssm.a_log).data_mut().fill(30.0);
        let f = [0, 1, 2].map(|i| Tensor::randn(&[2, 3], 1.0, &mut rng(70 + i)));
        let mut tape = Tape::new();
        let fv = f.clone().map(|t| tape.constant(t));
        let mut cx = Ctx::new(&mut tape, &store, false);
        let base = inter_ma(&mut cx, &stage, &fv, 1, SsmOptions::default()).unwrap().map(|v| cx.value(v).clone());
        let mut probe = f.clone();
        probe[0].data_mut()[2] += 0.5;
        let fv = probe.map(|t| cx.tape.constant(t));
        let moved = inter_ma(&mut cx, &stage, &fv, 1, SsmOptions::default()).unwrap().map(|v| cx.value(v).clone());
        assert!(moved[0].column(2) != base[0].column(2));
        assert!(moved[0].slice_cols(0, 2).max_abs_diff(&base[0].slice_cols(0, 2)) < 1e-12);
        assert!(moved[1].max_abs_diff(&base[1]) < 1e-12);
        assert!(moved[2].max_abs_diff(&base[2]) < 1e-12);
    }

    #[test]
    fn concatenation_order_matters() {
        let (store, stack) = build(4, small_cfg(), 8);
        let stage = stack.blocks[0].inter.clone().unwrap();
        let f = [0, 1, 2].map(|i| Tensor::randn(&[4, 5], 1.0, &mut rng(80 + i)));
        let base = run_inter(&store, &stage, &f);
        let mut swapped_stage = stage.clone();
        swapped_stage.gates.swap(0, 2);
        let swapped = run_inter(&store, &swapped_stage, &[f[2].clone(), f[1].clone(), f[0].clone()]);
        assert!(swapped[2].max_abs_diff(&base[0]) > 1e-9);
    }

    #[test]
    fn residual_only_stack_reduces_to_head_formula() {
        let dim = 4;
        let (mut store, stack) = build(dim, small_cfg(), 9);
        stack.zero_merges(&mut store);
        let toks = [0, 1, 2].map(|i| Tensor::randn(&[dim, 2 * 4], 1.0, &mut rng(90 + i)));
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, true);
        let mt: Vec<ModalityTokens> = Modality::ALL
            .iter()
            .zip(&toks)
            .map(|(&m, t)| ModalityTokens { tokens: cx.tape.constant(t.clone()), batch: 2, n_patches: 3, modality: m })
            .collect();
        let mt = [mt[0], mt[1], mt[2]];
        let f = ma_stack(&mut cx, &stack, &mt).unwrap();
        assert_eq!(cx.value(f).dims(), &[3 * dim, 2]);
        let head = &stack.head;
        for m in 0..3 {
            for s in 0..2 {
                let col: Vec<f64> = toks[m].column(s * 4);
                let mean: Vec<f64> =
                    (0..dim).map(|r| (1..4).map(|j| toks[m].at(r, s * 4 + j)).sum::<f64>() / 3.0).collect();
                let z: Vec<f64> = col.into_iter().chain(mean).collect();
                let mu = z.iter().sum::<f64>() / z.len() as f64;
                let var = z.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / z.len() as f64;
                let normed: Vec<f64> = z.iter().map(|v| (v - mu) / (var + 1e-5).sqrt()).collect();
                let w = store.value(head.reduce[m].weight);
                let b = store.value(head.reduce[m].bias.unwrap());
                for r in 0..dim {
                    let e: f64 = (0..2 * dim).map(|c| w.at(r, c) * normed[c]).sum::<f64>() + b.data()[r];
                    assert!((cx.value(f).at(m * dim + r, s) - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradient_reaches_every_block_parameter() {
        let dim = 4;
        let (mut store, stack) = build(dim, MaConfig { blocks: 2, ..small_cfg() }, 10);
        let toks = [0, 1, 2].map(|i| Tensor::randn(&[dim, 2 * 4], 1.0, &mut rng(100 + i)));
        let mut tape = Tape::new();
        let inputs: Vec<Var> = toks.iter().map(|t| tape.input(t.clone())).collect();
        let mut cx = Ctx::new(&mut tape, &store, true);
        let mt: Vec<ModalityTokens> = Modality::ALL
            .iter()
            .zip(&inputs)
            .map(|(&m, &v)| ModalityTokens { tokens: v, batch: 2, n_patches: 3, modality: m })
            .collect();
        let f = ma_stack(&mut cx, &stack, &[mt[0], mt[1], mt[2]]).unwrap();
        let w = crate::gradcheck::probe_weights(cx.value(f).numel());
        let loss = cx.tape.weighted_sum(f, &w).unwrap();
        let grads = tape.gradients(loss).unwrap();
        for v in inputs {
            assert!(grads.get(v).unwrap().max_abs() > 0.0);
        }
        tape.backward(loss, &mut store).unwrap();
        for id in stack.params() {
            assert!(store.grad(id).max_abs() > 0.0, "{}", store.get(id).name);
        }
    }

    #[test]
    fn composed_gradients_match_finite_differences() {
        let dim = 3;
        let (mut store, stack) = build(dim, MaConfig { blocks: 1, d_state: 2, dt_rank: 2, ..MaConfig::default() }, 11);
        let toks = [0, 1, 2].map(|i| Tensor::randn(&[dim, 2 * 3], 1.0, &mut rng(110 + i)));
        let ids = stack.params();
        // unit-scale steps
        for &id in &ids {
            if store.get(id).name.ends_with("dt_bias") {
                store.value_mut(id).data_mut().fill(0.5);
            }
        }
        let err = crate::gradcheck::check_params(&mut store, &ids, crate::gradcheck::FD_STEP, |tape, store| {
            let mut cx = Ctx::new(tape, store, true);
            let mt: Vec<ModalityTokens> = Modality::ALL
                .iter()
                .zip(&toks)
                .map(|(&m, t)| ModalityTokens {
                    tokens: cx.tape.constant(t.clone()),
                    batch: 2,
                    n_patches: 2,
                    modality: m,
                })
                .collect();
            ma_stack(&mut cx, &stack, &[mt[0], mt[1], mt[2]])
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn empty_stack_and_mismatched_parts_are_errors() {
        let (store, mut stack) = build(2, small_cfg(), 12);
        let stage = stack.blocks[0].intra.clone().unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 4]));
        let b = tape.constant(Tensor::zeros(&[2, 6]));
        let mut cx = Ctx::new(&mut tape, &store, true);
        assert!(intra_ma(&mut cx, &stage, &[a, a, b], 2, SsmOptions::default()).is_err());
        stack.blocks.clear();
        let mt = Modality::ALL.map(|m| ModalityTokens { tokens: a, batch: 1, n_patches: 3, modality: m });
        assert!(ma_stack(&mut cx, &stack, &mt).is_err());
    }

    #[test]
    fn flop_models_scale() {
        let a = ma_block_flops(64, 1024, 16, 32, 3) as f64;
        let b = ma_block_flops(64, 2048, 16, 32, 3) as f64;
        assert!((b / a - 2.0).abs() < 1e-9);
        let a = attention_block_flops(64, 1024) as f64;
        let b = attention_block_flops(64, 2048) as f64;
        assert!(b / a > 3.0);
    }
}
