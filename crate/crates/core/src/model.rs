//! The full network: frozen encoder, optional adapters, prompts and
//! aggregation, and the two classifier heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{encode_modality, Backbone, BackboneConfig, EncodeTrace, Modality, ModalityTokens};
use crate::error::{shape_err, Error, Result};
use crate::mamba_agg::{ma_stack, MaConfig, MaStack};
use crate::nn::{Builder, Ctx};
use crate::objectives::{total_loss, ClassifierHeads, LossConfig, LossTerms, SupervisionBatch};
use crate::param::{ParamId, ParamKind, ParamStore};
use crate::pfa::{Pfa, PfaConfig};
use crate::srp::{PromptBank, SrpConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub pfa: Option<PfaConfig>,
    pub srp: Option<SrpConfig>,
    pub ma: Option<MaConfig>,
    pub classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if let Some(ma) = &self.ma {
            if ma.blocks == 0 {
                return Err(Error::Config("ma.blocks must be positive when aggregation is enabled".into()));
            }
        }
        Ok(())
    }

    /// Width of the retrieval embedding.
    pub fn feature_dim(&self) -> usize {
        3 * self.backbone.dim
    }
}

/// Which trainable components are switched on; the rows of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub pfa: bool,
    pub srp: bool,
    pub ma: bool,
}

impl Variant {
    pub const FULL: Variant = Variant { pfa: true, srp: true, ma: true };

    /// Rows A, C, D, E and F: frozen only, adapters, prompts, both, and both
    /// with aggregation.
    pub const ABLATION: [(&'static str, Variant); 5] = [
        ("A", Variant { pfa: false, srp: false, ma: false }),
        ("C", Variant { pfa: true, srp: false, ma: false }),
        ("D", Variant { pfa: false, srp: true, ma: false }),
        ("E", Variant { pfa: true, srp: true, ma: false }),
        ("F", Variant::FULL),
    ];

    pub fn describe(self) -> String {
        let mut parts = vec!["frozen"];
        if self.pfa {
            parts.push("pfa");
        }
        if self.srp {
            parts.push("srp");
        }
        if self.ma {
            parts.push("ma");
        }
        parts.join("+")
    }
}

/// Per-modality images `[B, C, H, W]` in `n, r, t` order.
pub type Triplet = [Tensor; 3];

/// Everything one forward pass produces.
pub struct Forward {
    pub tokens: [ModalityTokens; 3],
    pub traces: [EncodeTrace; 3],
    /// `[3D, B]` concatenated final class tokens.
    pub f_cls: Var,
    /// `[3D, B]` aggregated features.
    pub f_ma: Option<Var>,
}

impl Forward {
    /// The feature used for retrieval: aggregated when available.
    pub fn embedding(&self) -> Var {
        self.f_ma.unwrap_or(self.f_cls)
    }
}

#[derive(Clone, Debug)]
pub struct MambaPro {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub pfa: Option<Pfa>,
    pub bank: Option<PromptBank>,
    pub ma: Option<MaStack>,
    pub heads: ClassifierHeads,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl MambaPro {
    /// Builds every enabled component. Each component draws from its own
    /// random stream, so toggling one never changes another's initial values.
    pub fn new(store: &mut ParamStore, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let bc = config.backbone;
        let backbone = {
            let mut r = stream(seed, 1);
            Backbone::new(&mut Builder::new(store, &mut r, ParamKind::Frozen), bc)?
        };
        let pfa = config.pfa.map(|c| {
            let mut r = stream(seed, 2);
            Pfa::new(&mut Builder::new(store, &mut r, ParamKind::Trainable), bc.layers, bc.dim, c, bc.gelu)
        });
        let bank = config.srp.map(|c| {
            let mut r = stream(seed, 3);
            PromptBank::new(&mut Builder::new(store, &mut r, ParamKind::Trainable), bc.layers, bc.dim, c, bc.gelu)
        });
        let ma = config.ma.map(|c| {
            let mut r = stream(seed, 4);
            MaStack::new(&mut Builder::new(store, &mut r, ParamKind::Trainable), bc.dim, c)
        });
        let heads = {
            let mut r = stream(seed, 5);
            let mut b = Builder::new(store, &mut r, ParamKind::Trainable);
            ClassifierHeads::new(&mut b, config.feature_dim(), config.classes, ma.is_some())
        };
        Ok(Self { config, backbone, pfa, bank, ma, heads })
    }

    /// Trainable parameters in a fixed order.
    pub fn trainable(&self, store: &ParamStore) -> Vec<ParamId> {
        store.ids().filter(|&id| store.kind(id) == ParamKind::Trainable).collect()
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, images: &Triplet) -> Result<Forward> {
        let batch = images[0].dims().first().copied().unwrap_or(0);
        if images.iter().any(|t| t.dims().first() != Some(&batch)) {
            return shape_err("model forward: modality batches differ");
        }
        let mut tokens = Vec::with_capacity(3);
        let mut traces = Vec::with_capacity(3);
        for m in Modality::ALL {
            let (t, tr) =
                encode_modality(cx, &self.backbone, &images[m.index()], m, self.bank.as_ref(), self.pfa.as_ref())?;
            tokens.push(t);
            traces.push(tr);
        }
        let tokens = [tokens[0], tokens[1], tokens[2]];
        let mut cls = Vec::with_capacity(3);
        for t in &tokens {
            cls.push(t.cls(cx)?);
        }
        let f_cls = cx.tape.concat_rows(&cls)?;
        let f_ma = match &self.ma {
            Some(stack) => Some(ma_stack(cx, stack, &tokens)?),
            None => None,
        };
        let mut it = traces.into_iter();
        let traces = [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()];
        Ok(Forward { tokens, traces, f_cls, f_ma })
    }

    pub fn loss(
        &self,
        cx: &mut Ctx<'_>,
        images: &Triplet,
        labels: &[usize],
        cfg: &LossConfig,
    ) -> Result<(Var, LossTerms)> {
        let fwd = self.forward(cx, images)?;
        let batch = SupervisionBatch { f_cls: fwd.f_cls, f_ma: fwd.f_ma, labels: labels.to_vec() };
        total_loss(cx, &batch, &self.heads, cfg)
    }

    /// Inference-mode retrieval embeddings `[3D, B]`.
    pub fn embed(&self, store: &ParamStore, images: &Triplet) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let mut cx = Ctx::new(&mut tape, store, false);
        let fwd = self.forward(&mut cx, images)?;
        Ok(cx.value(fwd.embedding()).clone())
    }
}
