//! Train the full model on synthetic tri-modal identities and report
//! held-out retrieval before and after.
//!
//! ```text
//! cargo run --release --example train_toy
//! ```

use mambapro::config::RunConfig;
use mambapro::harness::train::{moving_average, train, Trainer};

fn main() -> mambapro::Result<()> {
    let cfg = RunConfig::toy();
    let trainer = Trainer::new(&cfg, cfg.variant)?;
    println!(
        "{} train / {} held-out samples, {} trainable scalars",
        trainer.data.train.len(),
        trainer.data.eval.len(),
        trainer.store.trainable_count()
    );
    let out = train(trainer)?;
    let totals: Vec<f64> = out.losses.iter().map(|t| t.total).collect();
    let smooth = moving_average(&totals, 20);
    for (i, v) in smooth.iter().enumerate().step_by(40) {
        println!("step {i:>4}  loss {v:.4}");
    }
    println!(
        "held-out mAP {:.4} -> {:.4}, R-1 {:.4} -> {:.4}",
        out.initial.map, out.last.map, out.initial.cmc[0], out.last.cmc[0]
    );
    Ok(())
}
