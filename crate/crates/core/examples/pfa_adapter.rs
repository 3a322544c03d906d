//! Parallel feed-forward adapters beside a frozen encoder layer.
//!
//! A fresh adapter has a zero down projection and leaves the frozen layer
//! untouched; after perturbing it the layer output moves by exactly the
//! adapter branch.
//!
//! ```text
//! cargo run --example pfa_adapter
//! ```

use mambapro::backbone::{encoder_layer, Backbone, BackboneConfig, Modality};
use mambapro::nn::{Builder, Ctx};
use mambapro::param::{ParamKind, ParamStore};
use mambapro::pfa::{Pfa, PfaConfig};
use mambapro::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mambapro::Result<()> {
    let cfg = BackboneConfig {
        dim: 16,
        layers: 2,
        heads: 4,
        patch: 4,
        channels: 3,
        img_h: 16,
        img_w: 8,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut Builder::new(&mut store, &mut rng, ParamKind::Frozen), cfg)?;
    let pfa = Pfa::new(
        &mut Builder::new(&mut store, &mut rng, ParamKind::Trainable),
        cfg.layers,
        cfg.dim,
        PfaConfig::default(),
        cfg.gelu,
    );
    println!(
        "frozen {} / trainable {} scalars, {} adapter blocks",
        store.count(ParamKind::Frozen),
        store.trainable_count(),
        pfa.blocks().len()
    );

    let seq = cfg.seq_len(0);
    let x = Tensor::randn(&[cfg.dim, 2 * seq], 1.0, &mut rng);
    let run = |store: &ParamStore| -> mambapro::Result<(Tensor, Tensor)> {
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let mut cx = Ctx::new(&mut tape, store, false);
        let plain = encoder_layer(&mut cx, &bb.layers[0], None, xv, seq)?;
        let adapted = encoder_layer(&mut cx, &bb.layers[0], Some(pfa.block(0, Modality::R)), xv, seq)?;
        Ok((cx.value(plain).clone(), cx.value(adapted).clone()))
    };
    let (plain, adapted) = run(&store)?;
    println!("fresh adapter: max |adapted - frozen| = {:e}", adapted.max_abs_diff(&plain));

    let down = pfa.block(0, Modality::R).down.weight;
    let dims = store.value(down).dims().to_vec();
    store.set_value(down, Tensor::randn(&dims, 0.1, &mut rng))?;
    let (plain, adapted) = run(&store)?;
    println!("perturbed adapter: max |adapted - frozen| = {:.4}", adapted.max_abs_diff(&plain));
    Ok(())
}
