use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
model.dim = 8
model.layers = 1
model.heads = 2
ma.blocks = 1
ma.d_state = 2
ma.dt_rank = 2
srp.prompts = 2
data.ids = 4
data.instances = 4
data.eval_ids = 4
train.steps = 4
train.p = 2
train.k = 2
train.eval_every = 2
bench.grid = 8,16
bench.reps = 1
";

fn run(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_mambapro"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn help_lists_every_subcommand() {
    let out = Command::new(env!("CARGO_BIN_EXE_mambapro")).arg("--help").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in ["gradcheck", "bench", "train-toy", "eval", "ablate"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn gradcheck_passes_and_breaking_an_op_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ok = run(dir.path(), TINY, &["gradcheck"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    let tsv = fs::read_to_string(dir.path().join("out/gradcheck.tsv")).unwrap();
    assert!(tsv.starts_with("check\trel_err\tstatus\n"));
    assert!(tsv.contains("composed:loss"));

    let broken = run(dir.path(), &format!("{TINY}gradcheck.break_op = gelu\n"), &["gradcheck"]);
    assert_eq!(broken.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&broken.stdout).contains("FAIL"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), "model.dim = 8\nmodel.depth = 3\n", &["eval"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model.depth") && err.contains("line 2"), "{err}");

    let out = run(dir.path(), "gradcheck.break_op = nope\n", &["gradcheck"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_writes_the_csv_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), TINY, &["bench", "--threads", "1"]);
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("out/bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,N_pa,flops_analytic,wall_ns_mean,wall_ns_stddev"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r.len(), 5);
        assert!(r[0] == "ma" || r[0] == "attention");
        assert!(r[2].parse::<u64>().unwrap() > 0);
        assert!(r[3].parse::<f64>().unwrap() > 0.0);
    }
    assert!(fs::read_to_string(dir.path().join("out/bench_summary.txt")).unwrap().contains("threads: 1"));
}

#[test]
fn train_then_eval_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), TINY, &["train-toy", "--seed", "3", "--precision", "f64"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(dir.path().join("out/metrics.tsv")).unwrap();
    assert!(metrics.starts_with("step\tL_ce_clip\tL_tri_clip\tL_ce_ma\tL_tri_ma\ttotal\tlr\n"));
    assert_eq!(metrics.lines().count(), 1 + 4);
    let eval_log = fs::read_to_string(dir.path().join("out/eval.tsv")).unwrap();
    let final_map = eval_log.lines().last().unwrap().split('\t').nth(1).unwrap().to_string();
    let saved = fs::read_to_string(dir.path().join("out/checkpoint/config.txt")).unwrap();
    assert!(saved.contains("seed = 3") && saved.contains("precision = f64"), "{saved}");

    let ckpt = dir.path().join("out/checkpoint");
    let eval_dir = dir.path().join("again");
    let out = Command::new(env!("CARGO_BIN_EXE_mambapro"))
        .args(["eval", "--checkpoint"])
        .arg(&ckpt)
        .arg("--out")
        .arg(&eval_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(eval_dir.join("eval.tsv")).unwrap();
    let map_line = report.lines().find(|l| l.starts_with("mAP\t")).unwrap();
    let (a, b): (f64, f64) = (map_line[4..].parse().unwrap(), final_map.parse().unwrap());
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
}

#[test]
fn shipped_toy_config_matches_the_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/toy.cfg");
    let loaded = mambapro::config::RunConfig::load(&path).unwrap();
    assert_eq!(loaded.to_text(), mambapro::config::RunConfig::toy().to_text());
}
