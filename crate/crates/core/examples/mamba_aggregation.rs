//! Mamba aggregation over the patch tokens of three modalities.
//!
//! Runs the stack on random tokens, then shows that a change to one `n`
//! patch reaches the `t` features only through the inter-modality scan.
//!
//! ```text
//! cargo run --example mamba_aggregation
//! ```

use mambapro::backbone::{Modality, ModalityTokens};
use mambapro::mamba_agg::{attention_block_flops, ma_block_flops, ma_stack, MaConfig, MaStack};
use mambapro::nn::{Builder, Ctx};
use mambapro::param::{ParamKind, ParamStore};
use mambapro::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn embed(
    store: &ParamStore,
    stack: &MaStack,
    toks: &[Tensor; 3],
    batch: usize,
    n_pa: usize,
) -> mambapro::Result<Tensor> {
    let mut tape = Tape::no_grad();
    let mut cx = Ctx::new(&mut tape, store, false);
    let mt = Modality::ALL.map(|m| ModalityTokens {
        tokens: cx.tape.constant(toks[m.index()].clone()),
        batch,
        n_patches: n_pa,
        modality: m,
    });
    let f = ma_stack(&mut cx, stack, &mt)?;
    Ok(cx.value(f).clone())
}

fn main() -> mambapro::Result<()> {
    let (dim, batch, n_pa) = (16, 2, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let toks: [Tensor; 3] = std::array::from_fn(|_| Tensor::randn(&[dim, batch * (1 + n_pa)], 1.0, &mut rng));

    for (label, inter) in [("intra + inter", true), ("intra only", false)] {
        let cfg = MaConfig { blocks: 2, d_state: 8, dt_rank: 4, inter, ..MaConfig::default() };
        let mut store = ParamStore::new();
        let stack = MaStack::new(
            &mut Builder::new(&mut store, &mut ChaCha8Rng::seed_from_u64(9), ParamKind::Trainable),
            dim,
            cfg,
        );
        let base = embed(&store, &stack, &toks, batch, n_pa)?;
        let mut probe = toks.clone();
        probe[0].data_mut()[3] += 1.0;
        let moved = embed(&store, &stack, &probe, batch, n_pa)?;
        let t_rows = (2 * dim..3 * dim)
            .flat_map(|r| base.row(r).iter().zip(moved.row(r)).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        println!("{label}: f_ma {:?}, change in t features after an n-patch edit {t_rows:.3e}", base.dims());
    }

    for n in [256, 512, 1024, 2048] {
        println!(
            "N_pa {n:>5}: block {:>12} vs attention {:>13} multiply-adds",
            ma_block_flops(64, n, 16, 32, 3),
            attention_block_flops(64, n)
        );
    }
    Ok(())
}
