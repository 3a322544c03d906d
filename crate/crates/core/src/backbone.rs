//! ViT-style encoder shared by all modalities: patch embedding, a learned
//! class token and positional table, and pre-norm transformer layers with
//! hook points for adapters and prompts.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{Builder, Ctx, LayerNorm, Mhsa, Mlp};
use crate::ops::GeluKind;
use crate::param::{ParamId, ParamKind};
use crate::pfa::{pfa_apply, pfa_combine, Pfa, PfaBlock};
use crate::srp::{assemble_layer_input, harvest, PromptBank};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    N,
    R,
    T,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::N, Modality::R, Modality::T];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::N => "n",
            Modality::R => "r",
            Modality::T => "t",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackboneConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub patch: usize,
    pub channels: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub ffn_ratio: usize,
    pub ln_eps: f64,
    pub gelu: GeluKind,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 4,
            heads: 4,
            patch: 8,
            channels: 3,
            img_h: 32,
            img_w: 16,
            ffn_ratio: 4,
            ln_eps: 1e-5,
            gelu: GeluKind::Tanh,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.heads == 0 || self.patch == 0 || self.channels == 0 {
            return Err(Error::Config("backbone dims must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if !self.img_h.is_multiple_of(self.patch)
            || !self.img_w.is_multiple_of(self.patch)
            || self.img_h == 0
            || self.img_w == 0
        {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch {}",
                self.img_h, self.img_w, self.patch
            )));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.img_h / self.patch) * (self.img_w / self.patch)
    }

    pub fn patch_features(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Tokens per sample at every layer input.
    pub fn seq_len(&self, prompts: usize) -> usize {
        1 + self.n_patches() + 3 * prompts
    }
}

/// Class and patch tokens of a batch: `tokens` is `[D, batch * (1 + N_pa)]`
/// with each sample laid out as `[cls, patches]`.
#[derive(Clone, Copy, Debug)]
pub struct ModalityTokens {
    pub tokens: Var,
    pub batch: usize,
    pub n_patches: usize,
    pub modality: Modality,
}

impl ModalityTokens {
    pub fn cls(&self, cx: &mut Ctx<'_>) -> Result<Var> {
        cx.tape.pick(self.tokens, &[1, self.n_patches], self.batch, 0)
    }

    pub fn patches(&self, cx: &mut Ctx<'_>) -> Result<Var> {
        cx.tape.pick(self.tokens, &[1, self.n_patches], self.batch, 1)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: Mhsa,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

impl EncoderLayer {
    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.ln1.params();
        v.extend(self.attn.params());
        v.extend(self.ln2.params());
        v.extend(self.ffn.params());
        v
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub patch_proj: crate::nn::LinearMap,
    /// `[D, 1]`
    pub cls: ParamId,
    /// `[D, 1 + N_pa]`
    pub pos: ParamId,
    pub layers: Vec<EncoderLayer>,
}

impl Backbone {
    /// Random weights stand in for a pre-trained encoder; every parameter is
    /// created frozen.
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut b = b.with_kind(ParamKind::Frozen);
        let d = config.dim;
        let patch_proj = crate::nn::LinearMap::new(&mut b, "backbone.patch_proj", config.patch_features(), d, true);
        let cls = b.normal("backbone.cls", &[d, 1], 0.02);
        let pos = b.normal("backbone.pos", &[d, 1 + config.n_patches()], 0.02);
        let layers = (0..config.layers)
            .map(|l| {
                let name = format!("backbone.layer{l}");
                EncoderLayer {
                    ln1: LayerNorm::new(&mut b, &format!("{name}.ln1"), d, config.ln_eps),
                    attn: Mhsa::new(&mut b, &format!("{name}.attn"), d, config.heads),
                    ln2: LayerNorm::new(&mut b, &format!("{name}.ln2"), d, config.ln_eps),
                    ffn: Mlp::new(&mut b, &format!("{name}.ffn"), d, config.ffn_ratio * d, config.gelu),
                }
            })
            .collect();
        Ok(Self { config, patch_proj, cls, pos, layers })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.patch_proj.params();
        v.push(self.cls);
        v.push(self.pos);
        v.extend(self.layers.iter().flat_map(|l| l.params()));
        v
    }
}

/// Cuts `images: [B, C, H, W]` into non-overlapping patches, giving
/// `[C * p * p, B * N_pa]` with patches in row-major grid order.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let [b, c, h, w] = match images.dims() {
        &[b, c, h, w] => [b, c, h, w],
        d => return shape_err(format!("expected [B, C, H, W] images, got {d:?}")),
    };
    if h % patch != 0 || w % patch != 0 {
        return shape_err(format!("image {h}x{w} not divisible by patch {patch}"));
    }
    let (gh, gw) = (h / patch, w / patch);
    let n_pa = gh * gw;
    let feats = c * patch * patch;
    let cols = b * n_pa;
    let src = images.data();
    let mut out = vec![0.0; feats * cols];
    for s in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let col = s * n_pa + gy * gw + gx;
                for ch in 0..c {
                    for py in 0..patch {
                        for px in 0..patch {
                            let f = (ch * patch + py) * patch + px;
                            let y = gy * patch + py;
                            let x = gx * patch + px;
                            out[f * cols + col] = src[((s * c + ch) * h + y) * w + x];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![feats, cols], out))
}

/// Patch projection, class token and positional embedding.
pub fn patch_embed(cx: &mut Ctx<'_>, bb: &Backbone, images: &Tensor, modality: Modality) -> Result<ModalityTokens> {
    let cfg = &bb.config;
    if images.rank() != 4 || images.dims()[1..] != [cfg.channels, cfg.img_h, cfg.img_w] {
        return shape_err(format!(
            "images {:?} do not match [B, {}, {}, {}]",
            images.dims(),
            cfg.channels,
            cfg.img_h,
            cfg.img_w
        ));
    }
    let batch = images.dims()[0];
    let patches = cx.tape.constant(patchify(images, cfg.patch)?);
    let emb = bb.patch_proj.forward(cx, patches)?;
    let cls = cx.param(bb.cls);
    let cls = cx.tape.tile_cols(cls, batch)?;
    let seq = cx.tape.interleave(&[cls, emb], batch)?;
    let pos = cx.param(bb.pos);
    let tokens = cx.tape.add(seq, pos)?;
    Ok(ModalityTokens { tokens, batch, n_patches: cfg.n_patches(), modality })
}

/// One pre-norm layer: `F̄ = MHSA(LN(F)) + F`, then
/// `F̂ = FFN(LN(F̄)) + PFA(F̄) + F̄` (the adapter term is dropped when absent).
pub fn encoder_layer(
    cx: &mut Ctx<'_>,
    layer: &EncoderLayer,
    adapter: Option<&PfaBlock>,
    f: Var,
    seq_len: usize,
) -> Result<Var> {
    let cols = cx.value(f).cols();
    if seq_len == 0 || !cols.is_multiple_of(seq_len) {
        return shape_err(format!("encoder layer: {cols} tokens is not a multiple of sequence length {seq_len}"));
    }
    let a = layer.ln1.forward(cx, f)?;
    let a = layer.attn.forward(cx, a, seq_len)?;
    let fbar = cx.tape.add(a, f)?;
    let h = layer.ln2.forward(cx, fbar)?;
    let ffn_out = layer.ffn.forward(cx, h)?;
    match adapter {
        Some(block) => {
            let p = pfa_apply(cx, block, fbar)?;
            pfa_combine(cx, ffn_out, p, fbar)
        }
        None => cx.tape.add(ffn_out, fbar),
    }
}

/// Per-layer bookkeeping of one encoding pass.
#[derive(Clone, Debug, Default)]
pub struct EncodeTrace {
    /// Tokens per sample at each layer input.
    pub layer_input_lens: Vec<usize>,
    /// Prompt slots harvested from each layer output.
    pub harvested: Vec<[Var; 3]>,
}

/// Runs all layers for one modality, inserting prompts before each layer and
/// stripping them after, and returns the final class and patch tokens.
pub fn encode_modality(
    cx: &mut Ctx<'_>,
    bb: &Backbone,
    images: &Tensor,
    modality: Modality,
    bank: Option<&PromptBank>,
    adapters: Option<&Pfa>,
) -> Result<(ModalityTokens, EncodeTrace)> {
    let embedded = patch_embed(cx, bb, images, modality)?;
    let batch = embedded.batch;
    let tokens = 1 + embedded.n_patches;
    let prompts = bank.map_or(0, |b| b.prompts_per_modality());
    let seq_len = bb.config.seq_len(prompts);
    let mut trace = EncodeTrace::default();
    let mut f = embedded.tokens;
    let mut prev: Option<[Var; 3]> = None;
    for (l, layer) in bb.layers.iter().enumerate() {
        let x = assemble_layer_input(cx, l, modality, f, bank, prev.as_ref(), batch)?;
        trace.layer_input_lens.push(cx.value(x).cols() / batch);
        let y = encoder_layer(cx, layer, adapters.map(|a| a.block(l, modality)), x, seq_len)?;
        let h = harvest(cx, y, tokens, prompts, batch)?;
        f = h.fstar;
        if let Some(p) = h.prompts {
            trace.harvested.push(p);
        }
        prev = h.prompts;
    }
    Ok((ModalityTokens { tokens: f, ..embedded }, trace))
}
