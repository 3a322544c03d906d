use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{check_inputs, FD_STEP};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn assert_grads_match<F>(inputs: &[Tensor], tol: f64, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let err = check_inputs(inputs, FD_STEP, f).unwrap();
    assert!(err < tol, "finite-difference rel-err {err:e} exceeds {tol:e}");
}
