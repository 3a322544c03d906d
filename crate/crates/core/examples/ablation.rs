//! Trains the frozen-only model and each component combination from the same
//! seed and prints the comparison table.
//!
//! ```text
//! cargo run --release --example ablation
//! ```

use mambapro::config::RunConfig;
use mambapro::harness::train::{ablate, ablation_table};

fn main() -> mambapro::Result<()> {
    let rows = ablate(&RunConfig::toy())?;
    print!("{}", ablation_table(&rows));
    let a = rows.iter().find(|r| r.label == "A").expect("row A");
    let f = rows.iter().find(|r| r.label == "F").expect("row F");
    println!("full over frozen-only: {:+.4} mAP", f.last.map - a.last.map);
    Ok(())
}
