//! Synergistic residual prompts: slot layout of every modality's layer input
//! and the sequence length seen by each encoder layer.
//!
//! Each modality's first-layer prompt is filled with a marker value and the
//! transfer blocks are set to identities, so the harvested slots show which
//! source modality landed where.
//!
//! ```text
//! cargo run --example srp_prompts
//! ```

use mambapro::backbone::{BackboneConfig, Modality};
use mambapro::model::{MambaPro, ModelConfig};
use mambapro::nn::{Builder, Ctx, Mlp};
use mambapro::ops::GeluKind;
use mambapro::param::{ParamKind, ParamStore};
use mambapro::srp::{assemble_layer_input, harvest, PromptBank, SrpConfig};
use mambapro::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn identity(store: &mut ParamStore, m: &Mlp, dim: usize) -> mambapro::Result<()> {
    let eye = Tensor::from_fn(&[dim, dim], |i| if i / dim == i % dim { 1.0 } else { 0.0 });
    store.set_value(m.fc1.weight, eye.clone())?;
    store.set_value(m.fc2.weight, eye)?;
    for b in [m.fc1.bias, m.fc2.bias].into_iter().flatten() {
        store.set_value(b, Tensor::zeros(&[dim]))?;
    }
    Ok(())
}

fn main() -> mambapro::Result<()> {
    let dim = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let cfg = SrpConfig { prompts: 2, ..SrpConfig::default() };
    let bank =
        PromptBank::new(&mut Builder::new(&mut store, &mut rng, ParamKind::Trainable), 2, dim, cfg, GeluKind::Tanh);
    for tb in bank.transfer_blocks() {
        identity(&mut store, tb, dim)?;
    }
    for m in Modality::ALL {
        store.set_value(bank.prompts[0][m.index()], Tensor::full(&[dim, 2], 10.0 * (m.index() + 1) as f64))?;
    }

    let (batch, tokens) = (1, 5);
    for m in Modality::ALL {
        let mut tape = Tape::no_grad();
        let fstar = tape.constant(Tensor::zeros(&[dim, batch * tokens]));
        let mut cx = Ctx::new(&mut tape, &store, false);
        let x = assemble_layer_input(&mut cx, 0, m, fstar, Some(&bank), None, batch)?;
        let h = harvest(&mut cx, x, tokens, 2, batch)?;
        let slots: Vec<f64> = h.prompts.expect("prompts enabled").iter().map(|&s| cx.value(s).at(0, 0)).collect();
        println!("layer-0 input of {}: {} tokens, slot markers {slots:?}", m.name(), cx.value(x).cols());
    }

    let config = ModelConfig {
        backbone: BackboneConfig {
            dim: 8,
            layers: 3,
            heads: 2,
            patch: 4,
            channels: 3,
            img_h: 16,
            img_w: 8,
            ..Default::default()
        },
        pfa: None,
        srp: Some(SrpConfig { prompts: 3, ..SrpConfig::default() }),
        ma: None,
        classes: 4,
    };
    let mut store = ParamStore::new();
    let model = MambaPro::new(&mut store, config, 0)?;
    let images: [Tensor; 3] = std::array::from_fn(|_| Tensor::randn(&[2, 3, 16, 8], 1.0, &mut rng));
    let mut tape = Tape::no_grad();
    let mut cx = Ctx::new(&mut tape, &store, false);
    let fwd = model.forward(&mut cx, &images)?;
    println!(
        "full model, N_pa = {}, N_pr = 3: per-layer sequence lengths {:?}",
        config.backbone.n_patches(),
        fwd.traces[0].layer_input_lens
    );
    Ok(())
}
