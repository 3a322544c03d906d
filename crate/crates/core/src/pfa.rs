//! Parallel feed-forward adapter: a trainable up-then-down MLP whose output is
//! summed beside each frozen FFN.

use rand::Rng;

use crate::backbone::Modality;
use crate::error::Result;
use crate::nn::{Builder, Ctx, LinearMap};
use crate::ops::GeluKind;
use crate::param::{ParamId, ParamStore};
use crate::tape::Var;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PfaConfig {
    /// Hidden width as a multiple of the embedding dim; must be at least 1.
    pub ratio: usize,
    /// One adapter per layer for all modalities, or one per modality.
    pub shared: bool,
}

impl Default for PfaConfig {
    fn default() -> Self {
        Self { ratio: 2, shared: true }
    }
}

#[derive(Clone, Debug)]
pub struct PfaBlock {
    pub up: LinearMap,
    pub down: LinearMap,
    pub gelu: GeluKind,
}

impl PfaBlock {
    /// The down projection starts at zero, so a fresh adapter leaves the
    /// frozen layer's output untouched.
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, hidden: usize, gelu: GeluKind) -> Self {
        assert!(hidden >= dim, "adapter hidden width {hidden} below embedding dim {dim}");
        Self {
            up: LinearMap::new(b, &format!("{name}.up"), dim, hidden, true),
            down: LinearMap::zeros(b, &format!("{name}.down"), hidden, dim, true),
            gelu,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.up.params();
        v.extend(self.down.params());
        v
    }

    pub fn zero(&self, store: &mut ParamStore) {
        for id in self.params() {
            store.value_mut(id).data_mut().fill(0.0);
        }
    }
}

/// `down(gelu(up(F̄)))`.
pub fn pfa_apply(cx: &mut Ctx<'_>, block: &PfaBlock, fbar: Var) -> Result<Var> {
    let h = block.up.forward(cx, fbar)?;
    let h = cx.tape.gelu(h, block.gelu)?;
    block.down.forward(cx, h)
}

/// FFN path + adapter path + residual.
pub fn pfa_combine(cx: &mut Ctx<'_>, ffn_out: Var, pfa_out: Var, fbar: Var) -> Result<Var> {
    let s = cx.tape.add(ffn_out, pfa_out)?;
    cx.tape.add(s, fbar)
}

/// Adapters for every layer, shared across modalities or per modality.
#[derive(Clone, Debug)]
pub struct Pfa {
    pub config: PfaConfig,
    layers: usize,
    blocks: Vec<PfaBlock>,
}

impl Pfa {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, layers: usize, dim: usize, config: PfaConfig, gelu: GeluKind) -> Self {
        let hidden = config.ratio * dim;
        let mut blocks = Vec::new();
        if config.shared {
            for l in 0..layers {
                blocks.push(PfaBlock::new(b, &format!("pfa.{l}"), dim, hidden, gelu));
            }
        } else {
            for m in Modality::ALL {
                for l in 0..layers {
                    blocks.push(PfaBlock::new(b, &format!("pfa.{}.{l}", m.name()), dim, hidden, gelu));
                }
            }
        }
        Self { config, layers, blocks }
    }

    pub fn block(&self, layer: usize, modality: Modality) -> &PfaBlock {
        if self.config.shared {
            &self.blocks[layer]
        } else {
            &self.blocks[modality.index() * self.layers + layer]
        }
    }

    pub fn blocks(&self) -> &[PfaBlock] {
        &self.blocks
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }
}
