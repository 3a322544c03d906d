use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mambapro::config::RunConfig;
use mambapro::harness::{cmd_ablate, cmd_bench, cmd_eval, cmd_gradcheck, cmd_train_toy};
use mambapro::DType;

#[derive(Parser)]
#[command(name = "mambapro", about = "Gradient checks, scaling benchmark, toy training and retrieval eval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Element type of written tensor dumps.
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every differentiable op and the composed model.
    Gradcheck,
    /// Aggregation block vs attention baseline wall time over the patch grid.
    Bench,
    /// Train on synthetic identities; writes metrics, held-out eval and a checkpoint.
    TrainToy {
        /// Continue from a checkpoint directory (its saved configuration is used).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Held-out retrieval metrics of a checkpoint or of the initial model.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the A/C/D/E/F component grid and print the comparison table.
    Ablate,
}

fn run(cli: Cli) -> mambapro::Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = cli.precision {
        cfg.precision = match p {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        };
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| mambapro::Error::Config(format!("thread pool: {e}")))?;
    }
    let out = match &cli.command {
        Command::Gradcheck => cmd_gradcheck(&cfg, &cli.out)?,
        Command::Bench => cmd_bench(&cfg, &cli.out)?,
        Command::TrainToy { resume } => cmd_train_toy(&cfg, &cli.out, resume.as_deref())?,
        Command::Eval { checkpoint } => cmd_eval(&cfg, &cli.out, checkpoint.as_deref())?,
        Command::Ablate => cmd_ablate(&cfg, &cli.out)?,
    };
    print!("{}", out.text);
    Ok(out.success)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
