//! Finite-difference check of every differentiable op, the adapters, the
//! prompts, the aggregation stack and the composed loss.
//!
//! ```text
//! cargo run --release --example gradcheck
//! ```

use mambapro::config::GradcheckConfig;
use mambapro::harness::suite::run_suite;

fn main() -> mambapro::Result<()> {
    let report = run_suite(&GradcheckConfig::default(), 0)?;
    for r in &report.results {
        println!("{:<18} {:.2e} over {} recorded ops", r.name, r.rel_err, r.recorded.len());
    }
    println!(
        "worst {:.2e} against tol {:.0e}: {}",
        report.max_rel_err(),
        report.tol,
        if report.passed() { "ok" } else { "FAILED" }
    );
    Ok(())
}
