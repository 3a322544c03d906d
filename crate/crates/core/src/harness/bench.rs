//! Wall-clock scaling of one aggregation block against the attention
//! baseline over a grid of patch counts.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::Result;
use crate::mamba_agg::{attention_block_flops, ma_block, ma_block_flops, AttentionBaseline, MaBlock};
use crate::nn::{Builder, Ctx};
use crate::param::{ParamKind, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "method,N_pa,flops_analytic,wall_ns_mean,wall_ns_stddev";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Ma,
    Attention,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ma => "ma",
            Method::Attention => "attention",
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub method: Method,
    pub n_pa: usize,
    pub flops: u64,
    pub mean_ns: f64,
    pub stddev_ns: f64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub threads: usize,
}

/// Least-squares polynomial fit of `y` on `x` of the given degree; returns
/// the coefficients (constant first) and R².
pub fn poly_fit(x: &[f64], y: &[f64], degree: usize) -> (Vec<f64>, f64) {
    let m = degree + 1;
    let mut a = vec![vec![0.0; m + 1]; m];
    for (&xi, &yi) in x.iter().zip(y) {
        let pows: Vec<f64> = (0..m).map(|p| xi.powi(p as i32)).collect();
        for r in 0..m {
            for c in 0..m {
                a[r][c] += pows[r] * pows[c];
            }
            a[r][m] += pows[r] * yi;
        }
    }
    for col in 0..m {
        let piv = (col..m).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).expect("non-empty");
        a.swap(col, piv);
        for r in 0..m {
            if r != col && a[col][col] != 0.0 {
                let f = a[r][col] / a[col][col];
                for c in col..=m {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let coef: Vec<f64> = (0..m).map(|i| if a[i][i] == 0.0 { 0.0 } else { a[i][m] / a[i][i] }).collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let pred: f64 = coef.iter().enumerate().map(|(p, c)| c * xi.powi(p as i32)).sum();
            (yi - pred).powi(2)
        })
        .sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    (coef, r2)
}

impl BenchReport {
    fn series(&self, method: Method) -> (Vec<f64>, Vec<f64>) {
        self.rows.iter().filter(|r| r.method == method).map(|r| (r.n_pa as f64, r.mean_ns)).unzip()
    }

    /// R² of a straight-line fit of time against patch count.
    pub fn linear_r2(&self, method: Method) -> f64 {
        let (x, y) = self.series(method);
        poly_fit(&x, &y, 1).1
    }

    pub fn quadratic_r2(&self, method: Method) -> f64 {
        let (x, y) = self.series(method);
        poly_fit(&x, &y, 2).1
    }

    /// `t(N) / t(N / 2)` at the largest grid point `N` whose half is also on
    /// the grid.
    pub fn doubling_ratio(&self, method: Method) -> Option<f64> {
        let (x, y) = self.series(method);
        let at = |n: f64| x.iter().position(|&v| v == n).map(|i| y[i]);
        let mut best = None;
        for (i, &n) in x.iter().enumerate() {
            if let Some(half) = at(n / 2.0) {
                if best.is_none_or(|(bn, _)| n > bn) {
                    best = Some((n, y[i] / half));
                }
            }
        }
        best.map(|(_, r)| r)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{:.0},{:.0}", r.method.name(), r.n_pa, r.flops, r.mean_ns, r.stddev_ns);
        }
        s
    }

    /// The CSV without the timing columns: identical for identical configs.
    pub fn to_flops_csv(&self) -> String {
        let mut s = String::from("method,N_pa,flops_analytic\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.method.name(), r.n_pa, r.flops);
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "threads: {}", self.threads);
        for m in [Method::Ma, Method::Attention] {
            let _ = writeln!(
                s,
                "{}: linear R2 = {:.4}, quadratic R2 = {:.4}, doubling ratio = {}",
                m.name(),
                self.linear_r2(m),
                self.quadratic_r2(m),
                self.doubling_ratio(m).map_or("n/a".into(), |r| format!("{r:.2}")),
            );
        }
        s
    }
}

fn time_ns(reps: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_nanos() as f64);
    }
    let mean = samples.iter().sum::<f64>() / reps as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / reps as f64;
    Ok((mean, var.sqrt()))
}

/// Times inference-mode forward passes of one aggregation block and of the
/// attention baseline at every grid point.
pub fn run_bench(cfg: &RunConfig) -> Result<BenchReport> {
    let dim = cfg.backbone.dim;
    let ma_cfg = cfg.ma;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (block, attn) = {
        let mut b = Builder::new(&mut store, &mut rng, ParamKind::Trainable);
        (
            MaBlock::new(&mut b, "bench.ma", dim, &ma_cfg),
            AttentionBaseline::new(&mut b, dim, cfg.backbone.heads, ma_cfg.ln_eps),
        )
    };
    let batch = cfg.bench.batch;
    let mut rows = Vec::new();
    for &n_pa in &cfg.bench.grid {
        let inputs: [Tensor; 3] = std::array::from_fn(|_| Tensor::randn(&[dim, batch * n_pa], 1.0, &mut rng));
        let run = |method: Method| -> Result<()> {
            let mut tape = Tape::no_grad();
            let mut cx = Ctx::new(&mut tape, &store, false);
            let f: [Var; 3] = std::array::from_fn(|m| cx.tape.constant(inputs[m].clone()));
            match method {
                Method::Ma => ma_block(&mut cx, &block, f, batch, ma_cfg.ssm).map(|_| ()),
                Method::Attention => attn.forward(&mut cx, &f, batch).map(|_| ()),
            }
        };
        for method in [Method::Ma, Method::Attention] {
            let (mean_ns, stddev_ns) = time_ns(cfg.bench.reps, cfg.bench.warmup, || run(method))?;
            let flops = batch as u64
                * match method {
                    Method::Ma => ma_block_flops(dim, n_pa, ma_cfg.d_state, ma_cfg.dt_rank, ma_cfg.conv_kernel),
                    Method::Attention => attention_block_flops(dim, n_pa),
                };
            rows.push(BenchRow { method, n_pa, flops, mean_ns, stddev_ns });
        }
    }
    Ok(BenchReport { rows, threads: rayon::current_num_threads() })
}
