//! Synergistic residual prompts.
//!
//! Every layer input of modality `m` is `[F*, slot_n, slot_r, slot_t]` where
//! slot `m` holds the modality's own (refined) prompt and every other slot the
//! prompt of that source modality passed through its transfer block. From the
//! second layer on, the own prompt is refined with the prompts harvested from
//! the previous layer's output.

use rand::Rng;

use crate::backbone::Modality;
use crate::error::{shape_err, Result};
use crate::nn::{Builder, Ctx, Mlp};
use crate::ops::GeluKind;
use crate::param::{ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PromptMode {
    /// Own prompts only; the other two slots carry zero tokens.
    Independent,
    /// Cross-modal transfer, no residual refinement.
    Synergistic,
    /// Transfer plus refinement with one map per harvested slot, averaged.
    Separation,
    /// Transfer plus refinement of the averaged harvested prompts.
    #[default]
    Fusion,
}

impl PromptMode {
    pub fn name(self) -> &'static str {
        match self {
            PromptMode::Independent => "independent",
            PromptMode::Synergistic => "synergistic",
            PromptMode::Separation => "separation",
            PromptMode::Fusion => "fusion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Independent, Self::Synergistic, Self::Separation, Self::Fusion].into_iter().find(|m| m.name() == s)
    }

    fn transfers(self) -> bool {
        self != PromptMode::Independent
    }

    fn residual(self) -> bool {
        matches!(self, PromptMode::Separation | PromptMode::Fusion)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SrpConfig {
    pub prompts: usize,
    pub mode: PromptMode,
    /// One refinement map for all modalities instead of one per modality.
    pub rp_shared: bool,
}

impl Default for SrpConfig {
    fn default() -> Self {
        Self { prompts: 4, mode: PromptMode::Fusion, rp_shared: false }
    }
}

/// Two `D -> D` linear maps with a GELU between.
pub type TransferBlock = Mlp;

/// Applies a transfer block to every prompt token independently.
pub fn transfer(cx: &mut Ctx<'_>, tb: &TransferBlock, p: Var) -> Result<Var> {
    tb.forward(cx, p)
}

/// `fresh + rp(mean(harvested))`. `fresh` may be a single `[D, N_pr]` prompt
/// shared by every sample of the batch.
pub fn residual_fuse(cx: &mut Ctx<'_>, harvested: &[Var; 3], fresh: Var, rp: &Mlp) -> Result<Var> {
    let s = cx.tape.add(harvested[0], harvested[1])?;
    let s = cx.tape.add(s, harvested[2])?;
    let mean = cx.tape.scale(s, 1.0 / 3.0)?;
    let r = rp.forward(cx, mean)?;
    cx.tape.add(r, fresh)
}

/// `fresh + mean_j(rp_j(harvested_j))`.
pub fn residual_fuse_separate(cx: &mut Ctx<'_>, harvested: &[Var; 3], fresh: Var, rps: &[Mlp]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (h, rp) in harvested.iter().zip(rps) {
        let r = rp.forward(cx, *h)?;
        acc = Some(match acc {
            Some(a) => cx.tape.add(a, r)?,
            None => r,
        });
    }
    let mean = cx.tape.scale(acc.expect("three harvested slots"), 1.0 / 3.0)?;
    cx.tape.add(mean, fresh)
}

/// Prompt tokens extracted from one layer output, in slot order, together
/// with the class and patch tokens forwarded to the next layer.
#[derive(Clone, Debug)]
pub struct Harvest {
    pub prompts: Option<[Var; 3]>,
    pub fstar: Var,
}

#[derive(Clone, Debug)]
pub struct PromptBank {
    pub config: SrpConfig,
    /// `prompts[l][m]`: `[D, N_pr]`.
    pub prompts: Vec<[ParamId; 3]>,
    /// Indexed by `src * 3 + dst`; the diagonal is unused.
    transfers: Vec<Option<TransferBlock>>,
    /// Per destination modality (or one shared); `Separation` keeps three
    /// maps per entry, one per harvested slot.
    rp: Vec<Vec<Mlp>>,
}

impl PromptBank {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, layers: usize, dim: usize, config: SrpConfig, gelu: GeluKind) -> Self {
        let n = config.prompts;
        let mut prompts = Vec::with_capacity(layers);
        if n > 0 {
            for l in 0..layers {
                prompts.push(Modality::ALL.map(|m| b.normal(&format!("srp.prompt.{l}.{}", m.name()), &[dim, n], 0.02)));
            }
        }
        let mut transfers = vec![None; 9];
        if n > 0 && config.mode.transfers() {
            for src in Modality::ALL {
                for dst in Modality::ALL {
                    if src != dst {
                        let name = format!("srp.transfer.{}_{}", src.name(), dst.name());
                        transfers[src.index() * 3 + dst.index()] = Some(Mlp::new(b, &name, dim, dim, gelu));
                    }
                }
            }
        }
        let mut rp = Vec::new();
        if n > 0 && config.mode.residual() && layers > 1 {
            let owners: Vec<String> = if config.rp_shared {
                vec!["shared".into()]
            } else {
                Modality::ALL.iter().map(|m| m.name().to_string()).collect()
            };
            for owner in owners {
                let maps = match config.mode {
                    PromptMode::Separation => Modality::ALL
                        .iter()
                        .map(|s| Mlp::new(b, &format!("srp.rp.{owner}.{}", s.name()), dim, dim, gelu))
                        .collect(),
                    _ => vec![Mlp::new(b, &format!("srp.rp.{owner}"), dim, dim, gelu)],
                };
                rp.push(maps);
            }
        }
        Self { config, prompts, transfers, rp }
    }

    pub fn prompts_per_modality(&self) -> usize {
        self.config.prompts
    }

    pub fn transfer_block(&self, src: Modality, dst: Modality) -> Option<&TransferBlock> {
        self.transfers[src.index() * 3 + dst.index()].as_ref()
    }

    pub fn rp_maps(&self, owner: Modality) -> &[Mlp] {
        if self.rp.is_empty() {
            &[]
        } else if self.config.rp_shared {
            &self.rp[0]
        } else {
            &self.rp[owner.index()]
        }
    }

    pub fn transfer_blocks(&self) -> impl Iterator<Item = &TransferBlock> {
        self.transfers.iter().flatten()
    }

    pub fn rp_all(&self) -> impl Iterator<Item = &Mlp> {
        self.rp.iter().flatten()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.prompts.iter().flatten().copied().collect();
        v.extend(self.transfer_blocks().flat_map(|t| t.params()));
        v.extend(self.rp_all().flat_map(|m| m.params()));
        v
    }

    /// Zeroes every transfer block and refinement map.
    pub fn zero_maps(&self, store: &mut ParamStore) {
        for m in self.transfer_blocks().chain(self.rp_all()) {
            m.zero(store);
        }
    }
}

/// Builds the layer-`l` input of `modality` for a batch of `batch` samples:
/// `fstar` is `[D, batch * (1 + N_pa)]` and `prev` the previous layer's
/// harvested prompts (absent at the first layer).
pub fn assemble_layer_input(
    cx: &mut Ctx<'_>,
    layer: usize,
    modality: Modality,
    fstar: Var,
    bank: Option<&PromptBank>,
    prev: Option<&[Var; 3]>,
    batch: usize,
) -> Result<Var> {
    let bank = match bank {
        Some(b) if b.config.prompts > 0 => b,
        _ => return Ok(fstar),
    };
    let Some(layer_prompts) = bank.prompts.get(layer) else {
        return shape_err(format!("prompt bank has no layer {layer}"));
    };
    let dim = cx.value(fstar).rows();
    let n = bank.config.prompts;
    let mut parts = vec![fstar];
    for src in Modality::ALL {
        let p = cx.param(layer_prompts[src.index()]);
        let slot = if src == modality {
            let rp = bank.rp_maps(modality);
            let own = match (prev, bank.config.mode) {
                (Some(h), PromptMode::Fusion) if !rp.is_empty() => residual_fuse(cx, h, p, &rp[0])?,
                (Some(h), PromptMode::Separation) if !rp.is_empty() => residual_fuse_separate(cx, h, p, rp)?,
                _ => p,
            };
            if cx.value(own).cols() == n {
                cx.tape.tile_cols(own, batch)?
            } else {
                own
            }
        } else if let Some(tb) = bank.transfer_block(src, modality) {
            let t = transfer(cx, tb, p)?;
            cx.tape.tile_cols(t, batch)?
        } else {
            cx.tape.constant(Tensor::zeros(&[dim, n * batch]))
        };
        parts.push(slot);
    }
    cx.tape.interleave(&parts, batch)
}

/// Splits a layer output `[D, batch * (tokens + 3 N_pr)]` into class+patch
/// tokens and the three prompt slots.
pub fn harvest(cx: &mut Ctx<'_>, out: Var, tokens: usize, prompts: usize, batch: usize) -> Result<Harvest> {
    let cols = cx.value(out).cols();
    if cols != batch * (tokens + 3 * prompts) {
        return shape_err(format!("harvest: {cols} tokens for batch {batch} x ({tokens} + 3 x {prompts})"));
    }
    if prompts == 0 {
        return Ok(Harvest { prompts: None, fstar: out });
    }
    let lens = [tokens, prompts, prompts, prompts];
    let fstar = cx.tape.pick(out, &lens, batch, 0)?;
    let p =
        [cx.tape.pick(out, &lens, batch, 1)?, cx.tape.pick(out, &lens, batch, 2)?, cx.tape.pick(out, &lens, batch, 3)?];
    Ok(Harvest { prompts: Some(p), fstar })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::gelu_value;
    use crate::param::ParamKind;
    use crate::tape::Tape;
    use crate::testutil::rng;

    fn bank(dim: usize, layers: usize, config: SrpConfig) -> (ParamStore, PromptBank) {
        let mut store = ParamStore::new();
        let mut r = rng(11);
        let b = PromptBank::new(
            &mut Builder::new(&mut store, &mut r, ParamKind::Trainable),
            layers,
            dim,
            config,
            GeluKind::Tanh,
        );
        (store, b)
    }

    fn identity_mlp(store: &mut ParamStore, m: &Mlp, dim: usize) {
        let eye = Tensor::from_fn(&[dim, dim], |i| if i / dim == i % dim { 1.0 } else { 0.0 });
        store.set_value(m.fc1.weight, eye.clone()).unwrap();
        store.set_value(m.fc2.weight, eye).unwrap();
        store.set_value(m.fc1.bias.unwrap(), Tensor::zeros(&[dim])).unwrap();
        store.set_value(m.fc2.bias.unwrap(), Tensor::zeros(&[dim])).unwrap();
    }

    #[test]
    fn transfer_zero_and_near_identity() {
        let (mut store, b) = bank(3, 1, SrpConfig::default());
        let tb = b.transfer_block(Modality::R, Modality::N).unwrap().clone();
        let p = Tensor::from_fn(&[3, 4], |i| 20.0 + i as f64);
        identity_mlp(&mut store, &tb, 3);
        let mut tape = Tape::new();
        let pv = tape.constant(p.clone());
        let mut cx = Ctx::new(&mut tape, &store, false);
        let y = transfer(&mut cx, &tb, pv).unwrap();
        assert_eq!(cx.value(y).dims(), &[3, 4]);
        assert!(cx.value(y).max_abs_diff(&p) < 1e-12);
        tb.zero(&mut store);
        let mut tape = Tape::new();
        let pv = tape.constant(p);
        let mut cx = Ctx::new(&mut tape, &store, false);
        let y = transfer(&mut cx, &tb, pv).unwrap();
        assert!(cx.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn residual_fuse_hand_values() {
        let (mut store, b) = bank(1, 2, SrpConfig { prompts: 1, ..SrpConfig::default() });
        let rp = b.rp_maps(Modality::N)[0].clone();
        identity_mlp(&mut store, &rp, 1);
        let mut tape = Tape::new();
        let h = [1.0, 2.0, 3.0].map(|v| tape.constant(Tensor::new(vec![1, 1], vec![v]).unwrap()));
        let fresh = tape.constant(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
        let mut cx = Ctx::new(&mut tape, &store, false);
        let y = residual_fuse(&mut cx, &h, fresh, &rp).unwrap();
        let expect = 0.5 + gelu_value(2.0, GeluKind::Tanh);
        assert!((cx.value(y).item() - expect).abs() < 1e-15);

        rp.zero(&mut store);
        let mut tape = Tape::new();
        let h = [7.0, 7.0, 7.0].map(|v| tape.constant(Tensor::new(vec![1, 1], vec![v]).unwrap()));
        let fresh = tape.constant(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
        let mut cx = Ctx::new(&mut tape, &store, false);
        let y = residual_fuse(&mut cx, &h, fresh, &rp).unwrap();
        assert_eq!(cx.value(y).item(), 0.5);
    }

    #[test]
    fn no_prompts_assembles_identity() {
        let (store, b) = bank(2, 1, SrpConfig { prompts: 0, ..SrpConfig::default() });
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::randn(&[2, 6], 1.0, &mut rng(1)));
        let mut cx = Ctx::new(&mut tape, &store, false);
        let y = assemble_layer_input(&mut cx, 0, Modality::N, f, Some(&b), None, 2).unwrap();
        assert_eq!(y, f);
        let h = harvest(&mut cx, y, 3, 0, 2).unwrap();
        assert!(h.prompts.is_none());
        assert_eq!(h.fstar, f);
    }

    #[test]
    fn slot_order_and_harvest_roundtrip() {
        let dim = 2;
        let (mut store, b) = bank(dim, 2, SrpConfig { prompts: 1, ..SrpConfig::default() });
        for tb in b.transfer_blocks() {
            identity_mlp(&mut store, tb, dim);
        }
        for (mi, &id) in b.prompts[0].iter().enumerate() {
            store.set_value(id, Tensor::new(vec![dim, 1], vec![100.0 + mi as f64, 10.0]).unwrap()).unwrap();
        }
        for m in Modality::ALL {
            let mut tape = Tape::new();
            let fstar = tape.constant(Tensor::from_fn(&[dim, 6], |i| -(i as f64)));
            let mut cx = Ctx::new(&mut tape, &store, false);
            let x = assemble_layer_input(&mut cx, 0, m, fstar, Some(&b), None, 2).unwrap();
            assert_eq!(cx.value(x).cols(), 2 * (3 + 3));
            let h = harvest(&mut cx, x, 3, 1, 2).unwrap();
            assert_eq!(cx.value(h.fstar), cx.value(fstar));
            let slots = h.prompts.unwrap();
            for (j, s) in slots.iter().enumerate() {
                for sample in 0..2 {
                    let got = cx.value(*s).at(0, sample);
                    assert!((got - (100.0 + j as f64)).abs() < 1e-9, "{m:?} slot {j}: {got}");
                }
            }
        }
    }

    #[test]
    fn zeroed_maps_match_independent_prompting() {
        let dim = 3;
        let (mut store, full) = bank(dim, 2, SrpConfig { prompts: 2, ..SrpConfig::default() });
        full.zero_maps(&mut store);
        let mut indep = full.clone();
        indep.config.mode = PromptMode::Independent;
        indep.transfers = vec![None; 9];
        indep.rp.clear();
        let f = Tensor::randn(&[dim, 8], 1.0, &mut rng(4));
        let prev = [0, 1, 2].map(|i| Tensor::randn(&[dim, 4], 1.0, &mut rng(10 + i)));
        let run = |bank: &PromptBank| {
            let mut tape = Tape::new();
            let fv = tape.constant(f.clone());
            let pv = prev.clone().map(|t| tape.constant(t));
            let mut cx = Ctx::new(&mut tape, &store, false);
            let x = assemble_layer_input(&mut cx, 1, Modality::R, fv, Some(bank), Some(&pv), 2).unwrap();
            cx.value(x).clone()
        };
        assert_eq!(run(&full), run(&indep));
    }

    #[test]
    fn separation_differs_from_fusion_on_asymmetric_input() {
        let dim = 3;
        let (store_f, fusion) = bank(dim, 2, SrpConfig { prompts: 1, ..SrpConfig::default() });
        let (store_s, sep) = bank(dim, 2, SrpConfig { prompts: 1, mode: PromptMode::Separation, rp_shared: false });
        assert_eq!(sep.rp_maps(Modality::N).len(), 3);
        let h = [0, 1, 2].map(|i| Tensor::randn(&[dim, 1], 1.0 + i as f64, &mut rng(20 + i)));
        let own = |store: &ParamStore, bank: &PromptBank| {
            let mut tape = Tape::new();
            let hv = h.clone().map(|t| tape.constant(t));
            let mut cx = Ctx::new(&mut tape, store, false);
            let p = cx.param(bank.prompts[1][0]);
            let y = match bank.config.mode {
                PromptMode::Separation => residual_fuse_separate(&mut cx, &hv, p, bank.rp_maps(Modality::N)),
                _ => residual_fuse(&mut cx, &hv, p, &bank.rp_maps(Modality::N)[0]),
            }
            .unwrap();
            cx.value(y).clone()
        };
        assert!(own(&store_f, &fusion).max_abs_diff(&own(&store_s, &sep)) > 1e-6);
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in [PromptMode::Independent, PromptMode::Synergistic, PromptMode::Separation, PromptMode::Fusion] {
            assert_eq!(PromptMode::parse(m.name()), Some(m));
        }
        assert_eq!(PromptMode::parse("other"), None);
    }
}
