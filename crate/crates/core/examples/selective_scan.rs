//! Discretize a random selective SSM and run both scan implementations.
//!
//! ```text
//! cargo run --release --example selective_scan
//! ```

use mambapro::nn::Builder;
use mambapro::param::{ParamKind, ParamStore};
use mambapro::ssm::{
    discretize, flops_crossover, hidden_states, scan_fast, scan_sequential, InputDiscretization, SsmParams,
};
use mambapro::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mambapro::Result<()> {
    let (dim, d_state, dt_rank, k) = (8, 16, 4, 512);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let ssm =
        SsmParams::new(&mut Builder::new(&mut store, &mut rng, ParamKind::Trainable), "demo", dim, d_state, dt_rank);
    let x = Tensor::randn(&[dim, k], 1.0, &mut rng);

    for input in [InputDiscretization::Euler, InputDiscretization::Zoh] {
        let disc = discretize(&store, &ssm, &x, input)?;
        let slow = scan_sequential(&disc, &x)?;
        let fast = scan_fast(&disc, &x)?;
        let h = hidden_states(&disc);
        println!(
            "{input:?}: y {:?}, h {:?}, max |fast - sequential| = {:.2e}, mean step {:.4}",
            slow.dims(),
            h.dims(),
            fast.max_abs_diff(&slow),
            disc.delta.sum() / disc.delta.numel() as f64
        );
    }
    println!("SSM core beats attention from K = {}", flops_crossover(dim, d_state, dt_rank));
    Ok(())
}
