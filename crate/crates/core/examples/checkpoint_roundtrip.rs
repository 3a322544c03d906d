//! Save a run halfway, resume it in a fresh trainer and compare against an
//! uninterrupted run.
//!
//! ```text
//! cargo run --release --example checkpoint_roundtrip
//! ```

use mambapro::checkpoint::read_manifest;
use mambapro::config::RunConfig;
use mambapro::harness::train::Trainer;

fn main() -> mambapro::Result<()> {
    let mut cfg = RunConfig::toy();
    cfg.train.steps = 20;
    let dir = std::env::temp_dir().join(format!("mambapro-ckpt-{}", std::process::id()));

    let mut straight = Trainer::new(&cfg, cfg.variant)?;
    let mut first = Trainer::new(&cfg, cfg.variant)?;
    for _ in 0..10 {
        straight.train_step()?;
        first.train_step()?;
    }
    first.save(&dir)?;
    let rows = read_manifest(&dir)?;
    println!("saved {} tensors to {}", rows.len(), dir.display());

    let mut resumed = Trainer::resume(&dir)?;
    println!("resumed at step {}", resumed.step);
    while straight.step < cfg.train.steps {
        let a = straight.train_step()?;
        let b = resumed.train_step()?;
        println!("step {:>2}: {:.10} {:.10}", straight.step, a.total, b.total);
    }
    let same = straight.store.iter().zip(resumed.store.iter()).all(|((_, p), (_, q))| p.value == q.value);
    println!("parameters bitwise equal after resume: {same}");
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
