//! Run configuration: flat `key = value` text with `#` comments.
//!
//! Every key has a default; unknown keys and malformed values are errors.
//! [`RunConfig::to_text`] writes every key, and parsing that text gives back
//! the same configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::mamba_agg::MaConfig;
use crate::model::{ModelConfig, Variant};
use crate::objectives::LossConfig;
use crate::ops::GeluKind;
use crate::optim::AdamConfig;
use crate::pfa::PfaConfig;
use crate::retrieval::Metric;
use crate::srp::{PromptMode, SrpConfig};
use crate::ssm::{InputDiscretization, ScanMode};
use crate::tensor::DType;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub warmup_frac: f64,
    pub p: usize,
    pub k: usize,
    /// Held-out evaluation period in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 200, warmup_frac: 0.1, p: 4, k: 4, eval_every: 50, adam: AdamConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub grid: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    pub batch: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { grid: vec![256, 512, 1024, 2048], reps: 3, warmup: 1, batch: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub tol: f64,
    /// Name of an op whose analytic gradient is deliberately corrupted.
    pub break_op: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { tol: 1e-4, break_op: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: DType,
    /// Worker threads; 0 keeps the runtime default.
    pub threads: usize,
    pub backbone: BackboneConfig,
    pub variant: Variant,
    pub pfa: PfaConfig,
    pub srp: SrpConfig,
    pub ma: MaConfig,
    pub loss: LossConfig,
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub metric: Metric,
    pub bench: BenchConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: DType::F64,
            threads: 0,
            backbone: BackboneConfig::default(),
            variant: Variant::FULL,
            pfa: PfaConfig::default(),
            srp: SrpConfig::default(),
            ma: MaConfig::default(),
            loss: LossConfig::default(),
            data: SyntheticSpec::default(),
            train: TrainConfig::default(),
            metric: Metric::default(),
            bench: BenchConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn choice<T: Copy>(key: &str, v: &str, options: &[(&str, T)]) -> Result<T> {
    options.iter().find(|(name, _)| *name == v).map(|(_, t)| *t).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        Error::Config(format!("{key}: {v:?} is not one of {}", names.join(", ")))
    })
}

const GELU: [(&str, GeluKind); 2] = [("tanh", GeluKind::Tanh), ("erf", GeluKind::Erf)];
const INPUT: [(&str, InputDiscretization); 2] =
    [("euler", InputDiscretization::Euler), ("zoh", InputDiscretization::Zoh)];
const SCAN: [(&str, ScanMode); 2] = [("fast", ScanMode::Fast), ("sequential", ScanMode::Sequential)];
const METRIC: [(&str, Metric); 3] = [
    ("euclidean", Metric::Euclidean),
    ("normalized_euclidean", Metric::NormalizedEuclidean),
    ("cosine", Metric::Cosine),
];
const PRECISION: [(&str, DType); 2] = [("f32", DType::F32), ("f64", DType::F64)];

fn name_of<T: PartialEq>(options: &[(&'static str, T)], v: T) -> &'static str {
    options.iter().find(|(_, t)| *t == v).map(|(n, _)| *n).expect("every variant is listed")
}

impl RunConfig {
    /// Desk-scale settings used by the examples and the acceptance run.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.backbone.dim = 32;
        c.backbone.layers = 2;
        c.ma.dt_rank = 8;
        c.ma.d_state = 8;
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Parses `text` over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply(text)?;
        Ok(c)
    }

    /// Applies every assignment of `text` on top of `self`.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = num(key, v)?,
            "precision" => self.precision = choice(key, v, &PRECISION)?,
            "threads" => self.threads = num(key, v)?,

            "model.dim" => self.backbone.dim = num(key, v)?,
            "model.layers" => self.backbone.layers = num(key, v)?,
            "model.heads" => self.backbone.heads = num(key, v)?,
            "model.patch" => self.backbone.patch = num(key, v)?,
            "model.channels" => self.backbone.channels = num(key, v)?,
            "model.img_h" => self.backbone.img_h = num(key, v)?,
            "model.img_w" => self.backbone.img_w = num(key, v)?,
            "model.ffn_ratio" => self.backbone.ffn_ratio = num(key, v)?,
            "model.ln_eps" => self.backbone.ln_eps = num(key, v)?,
            "model.gelu" => self.backbone.gelu = choice(key, v, &GELU)?,

            "pfa.enabled" => self.variant.pfa = flag(key, v)?,
            "pfa.ratio" => self.pfa.ratio = num(key, v)?,
            "pfa.shared" => self.pfa.shared = flag(key, v)?,

            "srp.enabled" => self.variant.srp = flag(key, v)?,
            "srp.prompts" => self.srp.prompts = num(key, v)?,
            "srp.mode" => {
                self.srp.mode =
                    PromptMode::parse(v).ok_or_else(|| Error::Config(format!("{key}: unknown mode {v:?}")))?
            }
            "srp.rp_shared" => self.srp.rp_shared = flag(key, v)?,

            "ma.enabled" => self.variant.ma = flag(key, v)?,
            "ma.blocks" => self.ma.blocks = num(key, v)?,
            "ma.intra" => self.ma.intra = flag(key, v)?,
            "ma.inter" => self.ma.inter = flag(key, v)?,
            "ma.d_state" => self.ma.d_state = num(key, v)?,
            "ma.dt_rank" => self.ma.dt_rank = num(key, v)?,
            "ma.conv_kernel" => self.ma.conv_kernel = num(key, v)?,
            "ma.bn_eps" => self.ma.bn_eps = num(key, v)?,
            "ma.bn_momentum" => self.ma.bn_momentum = num(key, v)?,
            "ma.ln_eps" => self.ma.ln_eps = num(key, v)?,
            "ma.input" => self.ma.ssm.input = choice(key, v, &INPUT)?,
            "ma.scan" => self.ma.ssm.scan = choice(key, v, &SCAN)?,

            "loss.lambda_ce" => self.loss.lambda_ce = num(key, v)?,
            "loss.lambda_tri" => self.loss.lambda_tri = num(key, v)?,
            "loss.smoothing" => self.loss.smoothing = num(key, v)?,
            "loss.margin" => self.loss.margin = num(key, v)?,
            "loss.soft_margin" => self.loss.soft_margin = flag(key, v)?,

            "data.ids" => self.data.num_ids = num(key, v)?,
            "data.instances" => self.data.instances_per_id = num(key, v)?,
            "data.eval_ids" => self.data.eval_ids = num(key, v)?,
            "data.latent" => self.data.latent = num(key, v)?,
            "data.cameras" => self.data.cameras = num(key, v)?,
            "data.rho" => self.data.rho = num(key, v)?,
            "data.sigma" => self.data.sigma = num(key, v)?,
            "data.capture_dim" => self.data.capture_dim = num(key, v)?,
            "data.capture" => self.data.capture = num(key, v)?,

            "train.steps" => self.train.steps = num(key, v)?,
            "train.lr" => self.train.adam.lr = num(key, v)?,
            "train.warmup_frac" => self.train.warmup_frac = num(key, v)?,
            "train.beta1" => self.train.adam.beta1 = num(key, v)?,
            "train.beta2" => self.train.adam.beta2 = num(key, v)?,
            "train.adam_eps" => self.train.adam.eps = num(key, v)?,
            "train.weight_decay" => self.train.adam.weight_decay = num(key, v)?,
            "train.p" => self.train.p = num(key, v)?,
            "train.k" => self.train.k = num(key, v)?,
            "train.eval_every" => self.train.eval_every = num(key, v)?,

            "eval.metric" => self.metric = choice(key, v, &METRIC)?,

            "bench.grid" => {
                self.bench.grid = v.split(',').map(|s| num(key, s.trim())).collect::<Result<_>>()?;
            }
            "bench.reps" => self.bench.reps = num(key, v)?,
            "bench.warmup" => self.bench.warmup = num(key, v)?,
            "bench.batch" => self.bench.batch = num(key, v)?,

            "gradcheck.tol" => self.gradcheck.tol = num(key, v)?,
            "gradcheck.break_op" => {
                self.gradcheck.break_op = match v {
                    "" | "none" => None,
                    op => Some(op.to_string()),
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, one per line, in parse order.
    pub fn to_text(&self) -> String {
        let b = &self.backbone;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("precision", name_of(&PRECISION, self.precision).into());
        put("threads", self.threads.to_string());
        put("model.dim", b.dim.to_string());
        put("model.layers", b.layers.to_string());
        put("model.heads", b.heads.to_string());
        put("model.patch", b.patch.to_string());
        put("model.channels", b.channels.to_string());
        put("model.img_h", b.img_h.to_string());
        put("model.img_w", b.img_w.to_string());
        put("model.ffn_ratio", b.ffn_ratio.to_string());
        put("model.ln_eps", format!("{:e}", b.ln_eps));
        put("model.gelu", name_of(&GELU, b.gelu).into());
        put("pfa.enabled", self.variant.pfa.to_string());
        put("pfa.ratio", self.pfa.ratio.to_string());
        put("pfa.shared", self.pfa.shared.to_string());
        put("srp.enabled", self.variant.srp.to_string());
        put("srp.prompts", self.srp.prompts.to_string());
        put("srp.mode", self.srp.mode.name().into());
        put("srp.rp_shared", self.srp.rp_shared.to_string());
        put("ma.enabled", self.variant.ma.to_string());
        put("ma.blocks", self.ma.blocks.to_string());
        put("ma.intra", self.ma.intra.to_string());
        put("ma.inter", self.ma.inter.to_string());
        put("ma.d_state", self.ma.d_state.to_string());
        put("ma.dt_rank", self.ma.dt_rank.to_string());
        put("ma.conv_kernel", self.ma.conv_kernel.to_string());
        put("ma.bn_eps", format!("{:e}", self.ma.bn_eps));
        put("ma.bn_momentum", self.ma.bn_momentum.to_string());
        put("ma.ln_eps", format!("{:e}", self.ma.ln_eps));
        put("ma.input", name_of(&INPUT, self.ma.ssm.input).into());
        put("ma.scan", name_of(&SCAN, self.ma.ssm.scan).into());
        put("loss.lambda_ce", self.loss.lambda_ce.to_string());
        put("loss.lambda_tri", self.loss.lambda_tri.to_string());
        put("loss.smoothing", self.loss.smoothing.to_string());
        put("loss.margin", self.loss.margin.to_string());
        put("loss.soft_margin", self.loss.soft_margin.to_string());
        put("data.ids", self.data.num_ids.to_string());
        put("data.instances", self.data.instances_per_id.to_string());
        put("data.eval_ids", self.data.eval_ids.to_string());
        put("data.latent", self.data.latent.to_string());
        put("data.cameras", self.data.cameras.to_string());
        put("data.rho", self.data.rho.to_string());
        put("data.sigma", self.data.sigma.to_string());
        put("data.capture_dim", self.data.capture_dim.to_string());
        put("data.capture", self.data.capture.to_string());
        put("train.steps", self.train.steps.to_string());
        put("train.lr", format!("{:e}", self.train.adam.lr));
        put("train.warmup_frac", self.train.warmup_frac.to_string());
        put("train.beta1", self.train.adam.beta1.to_string());
        put("train.beta2", self.train.adam.beta2.to_string());
        put("train.adam_eps", format!("{:e}", self.train.adam.eps));
        put("train.weight_decay", self.train.adam.weight_decay.to_string());
        put("train.p", self.train.p.to_string());
        put("train.k", self.train.k.to_string());
        put("train.eval_every", self.train.eval_every.to_string());
        put("eval.metric", name_of(&METRIC, self.metric).into());
        put("bench.grid", self.bench.grid.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(","));
        put("bench.reps", self.bench.reps.to_string());
        put("bench.warmup", self.bench.warmup.to_string());
        put("bench.batch", self.bench.batch.to_string());
        put("gradcheck.tol", format!("{:e}", self.gradcheck.tol));
        put("gradcheck.break_op", self.gradcheck.break_op.clone().unwrap_or_else(|| "none".into()));
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model(self.variant).validate()?;
        self.loss.validate()?;
        self.synthetic().validate()?;
        if self.train.steps == 0 {
            return Err(Error::Config("train.steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.train.warmup_frac) {
            return Err(Error::Config(format!("train.warmup_frac must lie in [0, 1), got {}", self.train.warmup_frac)));
        }
        if self.bench.grid.is_empty() || self.bench.reps == 0 || self.bench.batch == 0 {
            return Err(Error::Config("bench.grid, bench.reps and bench.batch must be non-empty/positive".into()));
        }
        Ok(())
    }

    /// Model settings with the given components switched on.
    pub fn model(&self, variant: Variant) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone,
            pfa: variant.pfa.then_some(self.pfa),
            srp: variant.srp.then_some(self.srp),
            ma: variant.ma.then_some(self.ma),
            classes: self.data.num_ids,
        }
    }

    /// Data settings; image geometry follows the model and the seed follows
    /// the run.
    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            channels: self.backbone.channels,
            img_h: self.backbone.img_h,
            img_w: self.backbone.img_w,
            seed: self.seed,
            ..self.data
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_follow_the_module_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.srp.prompts, 4);
        assert_eq!(c.ma.d_state, 16);
        assert_eq!(c.ma.blocks, 2);
        assert_eq!(c.loss.lambda_ce, 0.25);
        assert_eq!(c.loss.lambda_tri, 1.0);
        assert_eq!(c.train.adam.lr, 3.5e-4);
        assert_eq!((c.train.adam.beta1, c.train.adam.beta2), (0.9, 0.999));
        c.validate().unwrap();
        RunConfig::toy().validate().unwrap();
    }

    #[test]
    fn parses_comments_and_whitespace() {
        let c = RunConfig::parse("# comment\n\n  model.dim = 16 # trailing\nsrp.mode=separation\nbench.grid = 8, 16\n")
            .unwrap();
        assert_eq!(c.backbone.dim, 16);
        assert_eq!(c.srp.mode, PromptMode::Separation);
        assert_eq!(c.bench.grid, vec![8, 16]);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let e = RunConfig::parse("model.dims = 4").unwrap_err().to_string();
        assert!(e.contains("unknown key") && e.contains("line 1"), "{e}");
        assert!(RunConfig::parse("model.dim = four").is_err());
        assert!(RunConfig::parse("model.dim").is_err());
        assert!(RunConfig::parse("ma.enabled = maybe").is_err());
        assert!(RunConfig::parse("srp.mode = mixed").is_err());
        assert!(RunConfig::parse("model.heads = 3").is_err());
        assert!(RunConfig::parse("data.rho = 2").is_err());
    }

    #[test]
    fn text_roundtrip_of_toy_config() {
        let mut c = RunConfig::toy();
        c.gradcheck.break_op = Some("gelu".into());
        c.metric = Metric::Cosine;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    proptest! {
        #[test]
        fn text_roundtrip(seed in any::<u64>(), lr in 1e-6f64..1.0, rho in 0.0f64..=1.0, prompts in 0usize..6, ma in any::<bool>()) {
            let mut c = RunConfig { seed, ..RunConfig::default() };
            c.train.adam.lr = lr;
            c.data.rho = rho;
            c.srp.prompts = prompts;
            c.variant.ma = ma;
            prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        }
    }
}
