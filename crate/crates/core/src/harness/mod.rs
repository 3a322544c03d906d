//! Subcommand implementations shared by the CLI, the examples and the
//! acceptance tests. Each `cmd_*` writes its artifacts under `out` and
//! returns the text meant for the terminal.

pub mod bench;
pub mod suite;
pub mod train;

use std::fs;
use std::path::Path;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::Result;
use crate::model::MambaPro;
use crate::param::ParamStore;

pub struct CmdOutput {
    pub text: String,
    /// False when the command ran but its check failed.
    pub success: bool,
}

fn ok(text: String) -> CmdOutput {
    CmdOutput { text, success: true }
}

/// Writes `gradcheck.tsv`; fails when any check exceeds the tolerance or an
/// op is not covered.
pub fn cmd_gradcheck(cfg: &RunConfig, out: &Path) -> Result<CmdOutput> {
    fs::create_dir_all(out)?;
    let report = suite::run_suite(&cfg.gradcheck, cfg.seed)?;
    let tsv = report.to_tsv();
    fs::write(out.join("gradcheck.tsv"), &tsv)?;
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    let text = format!("{tsv}max rel-err {:.3e} (tol {:.0e}): {verdict}\n", report.max_rel_err(), report.tol);
    Ok(CmdOutput { text, success: report.passed() })
}

/// Writes `bench.csv` and `bench_summary.txt`.
pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<CmdOutput> {
    fs::create_dir_all(out)?;
    let report = bench::run_bench(cfg)?;
    let csv = report.to_csv();
    let summary = report.summary();
    fs::write(out.join("bench.csv"), &csv)?;
    fs::write(out.join("bench_summary.txt"), &summary)?;
    Ok(ok(format!("{csv}{summary}")))
}

/// Trains (or resumes from `resume`) and writes `metrics.tsv`, `eval.tsv`
/// and `checkpoint/`.
pub fn cmd_train_toy(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<CmdOutput> {
    fs::create_dir_all(out)?;
    let trainer = match resume {
        Some(dir) => train::Trainer::resume(dir)?,
        None => train::Trainer::new(cfg, cfg.variant)?,
    };
    let o = train::train(trainer)?;
    fs::write(out.join("metrics.tsv"), &o.metrics_tsv)?;
    fs::write(out.join("eval.tsv"), &o.eval_tsv)?;
    o.trainer.save(&out.join("checkpoint"))?;
    let last_loss = o.losses.last().map_or(f64::NAN, |t| t.total);
    Ok(ok(format!(
        "{}steps {}, final loss {last_loss:.4}, held-out mAP {:.4} -> {:.4}\n",
        o.eval_tsv, o.trainer.step, o.initial.map, o.last.map
    )))
}

/// Evaluates the model saved in `checkpoint` (or a freshly initialized one)
/// on the held-out split; writes `eval.tsv`.
pub fn cmd_eval(cfg: &RunConfig, out: &Path, checkpoint_dir: Option<&Path>) -> Result<CmdOutput> {
    fs::create_dir_all(out)?;
    let cfg = match checkpoint_dir {
        Some(dir) => checkpoint::read_config(dir)?,
        None => cfg.clone(),
    };
    let mut store = ParamStore::new();
    let model = MambaPro::new(&mut store, cfg.model(cfg.variant), cfg.seed)?;
    if let Some(dir) = checkpoint_dir {
        checkpoint::load_params(dir, &mut store)?;
    }
    let data = cfg.synthetic().generate()?;
    let report = train::evaluate_split(&cfg, &model, &store, &data.eval)?;
    let tsv = train::report_tsv(&report);
    fs::write(out.join("eval.tsv"), &tsv)?;
    Ok(ok(tsv))
}

/// Writes `ablation.tsv` and `ablation.txt`.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<CmdOutput> {
    fs::create_dir_all(out)?;
    let rows = train::ablate(cfg)?;
    let table = train::ablation_table(&rows);
    fs::write(out.join("ablation.tsv"), train::ablation_tsv(&rows))?;
    fs::write(out.join("ablation.txt"), &table)?;
    Ok(ok(table))
}
