//! Wall time of one aggregation block against self-attention over the
//! concatenated patch sequence.
//!
//! ```text
//! cargo run --release --example scaling_bench
//! cargo run --release --example scaling_bench -- 128,256,512
//! ```

use mambapro::config::RunConfig;
use mambapro::harness::bench::run_bench;

fn main() -> mambapro::Result<()> {
    let mut cfg = RunConfig::default();
    if let Some(arg) = std::env::args().nth(1) {
        cfg.set("bench.grid", &arg)?;
    }
    let report = run_bench(&cfg)?;
    print!("{}{}", report.to_csv(), report.summary());
    Ok(())
}
