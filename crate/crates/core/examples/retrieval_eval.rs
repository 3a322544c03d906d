//! mAP and CMC on a hand-sized fixture and on random embeddings.
//!
//! ```text
//! cargo run --example retrieval_eval
//! ```

use mambapro::retrieval::{evaluate, rank, Metric, RetrievalSet, CMC_RANKS};
use mambapro::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn points(p: &[[f64; 2]]) -> Tensor {
    Tensor::from_fn(&[2, p.len()], |i| p[i % p.len()][i / p.len()])
}

fn main() -> mambapro::Result<()> {
    let query = RetrievalSet::new(points(&[[0.0, 0.0], [3.0, 1.0], [-1.0, 2.0]]), vec![0, 1, 2], vec![0; 3])?;
    let gallery = RetrievalSet::new(
        points(&[[0.1, 0.0], [2.0, 2.0], [0.0, 1.5], [3.5, 1.0], [-1.0, 1.0]]),
        vec![0, 1, 0, 1, 2],
        vec![1; 5],
    )?;
    for (q, r) in rank(&query, &gallery, Metric::Euclidean)?.iter().enumerate() {
        println!("query {q} ranking {r:?}");
    }
    let rep = evaluate(&query, &gallery, Metric::Euclidean)?;
    println!("fixture mAP {:.6} (17/18 = {:.6})", rep.map, 17.0 / 18.0);
    for (k, v) in CMC_RANKS.iter().zip(rep.cmc) {
        println!("  R-{k}: {v:.3}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let classes = 5;
    let n = 200;
    let g =
        RetrievalSet::new(Tensor::randn(&[16, n], 1.0, &mut rng), (0..n).map(|i| i % classes).collect(), vec![1; n])?;
    let q = RetrievalSet::new(Tensor::randn(&[16, classes], 1.0, &mut rng), (0..classes).collect(), vec![0; classes])?;
    println!(
        "random embeddings: mAP {:.4}, class prior {:.4}",
        evaluate(&q, &g, Metric::Cosine)?.map,
        1.0 / classes as f64
    );
    Ok(())
}
