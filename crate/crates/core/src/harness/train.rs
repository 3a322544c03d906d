//! Toy training on synthetic identities, held-out retrieval evaluation and
//! the component ablation grid.

use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{Dataset, PkSampler, Synthetic};
use crate::error::{Error, Result};
use crate::model::{MambaPro, Variant};
use crate::nn::Ctx;
use crate::objectives::LossTerms;
use crate::optim::{Adam, Schedule};
use crate::param::ParamStore;
use crate::retrieval::{evaluate, RetrievalReport, RetrievalSet, CMC_RANKS};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "step\tL_ce_clip\tL_tri_clip\tL_ce_ma\tL_tri_ma\ttotal\tlr";
pub const EVAL_HEADER: &str = "step\tmAP\tR1\tR5\tR10";

/// Samples embedded per inference pass.
const EVAL_CHUNK: usize = 64;

/// Held-out retrieval of `model` over `data`, every sample acting as a
/// query against all others.
pub fn evaluate_split(
    cfg: &RunConfig,
    model: &MambaPro,
    store: &ParamStore,
    data: &Dataset,
) -> Result<RetrievalReport> {
    let mut cols = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        cols.push(model.embed(store, &data.gather(chunk))?);
    }
    let parts: Vec<&Tensor> = cols.iter().collect();
    let emb = Tensor::concat_cols(&parts)?;
    let set = RetrievalSet::new(emb, data.labels.clone(), data.cameras.clone())?;
    evaluate(&set, &set, cfg.metric)
}

pub struct Trainer {
    pub config: RunConfig,
    pub variant: Variant,
    pub data: Synthetic,
    pub store: ParamStore,
    pub model: MambaPro,
    pub adam: Adam,
    sampler: PkSampler,
    schedule: Schedule,
    /// Optimizer steps taken so far.
    pub step: usize,
}

impl Trainer {
    pub fn new(config: &RunConfig, variant: Variant) -> Result<Self> {
        config.validate()?;
        let data = config.synthetic().generate()?;
        let mut store = ParamStore::new();
        let model = MambaPro::new(&mut store, config.model(variant), config.seed)?;
        let adam = Adam::new(&store, model.trainable(&store), config.train.adam)?;
        let sampler = PkSampler::new(&data.train, config.train.p, config.train.k, config.seed)?;
        let schedule = Schedule {
            base_lr: config.train.adam.lr,
            warmup_frac: config.train.warmup_frac,
            total: config.train.steps,
        };
        Ok(Self { config: config.clone(), variant, data, store, model, adam, sampler, schedule, step: 0 })
    }

    /// Rebuilds the run saved in `dir` (configuration, parameters, optimizer
    /// state and step counter).
    pub fn resume(dir: &Path) -> Result<Self> {
        let config = checkpoint::read_config(dir)?;
        let mut t = Self::new(&config, config.variant)?;
        t.step = checkpoint::resume(dir, &mut t.store, &mut t.adam)?;
        Ok(t)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut config = self.config.clone();
        config.variant = self.variant;
        checkpoint::save(dir, &self.store, Some(&self.adam), self.step, &config, config.precision)
    }

    pub fn lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// One PK batch, one backward pass and one optimizer update.
    pub fn train_step(&mut self) -> Result<LossTerms> {
        let batch = self.sampler.batch(self.step as u64);
        let images = self.data.train.gather(&batch);
        let labels: Vec<usize> = batch.iter().map(|&i| self.data.train.labels[i]).collect();
        let step = self.step;
        let diverged = |e: Error| match e {
            Error::NonFinite { op } => Error::Diverged { step, reason: format!("non-finite value in {op}") },
            other => other,
        };
        let mut tape = Tape::new();
        let (terms, bn) = {
            let mut cx = Ctx::new(&mut tape, &self.store, true);
            let (loss, terms) = self.model.loss(&mut cx, &images, &labels, &self.config.loss).map_err(diverged)?;
            let bn = std::mem::take(&mut cx.bn_updates);
            self.store.zero_grads();
            tape.backward(loss, &mut self.store).map_err(diverged)?;
            (terms, bn)
        };
        if !terms.total.is_finite() {
            return Err(Error::Diverged { step, reason: format!("loss is {}", terms.total) });
        }
        let lr = self.lr();
        self.adam.step(&mut self.store, lr);
        for u in &bn {
            u.apply(&mut self.store);
        }
        self.step += 1;
        Ok(terms)
    }

    pub fn evaluate(&self) -> Result<RetrievalReport> {
        evaluate_split(&self.config, &self.model, &self.store, &self.data.eval)
    }
}

pub fn metrics_row(step: usize, t: &LossTerms, lr: f64) -> String {
    format!("{step}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}", t.ce_clip, t.tri_clip, t.ce_ma, t.tri_ma, t.total, lr)
}

pub fn eval_row(step: usize, r: &RetrievalReport) -> String {
    format!("{step}\t{:.6}\t{:.6}\t{:.6}\t{:.6}", r.map, r.cmc[0], r.cmc[1], r.cmc[2])
}

pub struct TrainOutcome {
    pub initial: RetrievalReport,
    pub last: RetrievalReport,
    pub losses: Vec<LossTerms>,
    /// Loss log, [`METRICS_HEADER`] columns.
    pub metrics_tsv: String,
    /// Held-out log, [`EVAL_HEADER`] columns.
    pub eval_tsv: String,
    pub trainer: Trainer,
}

/// Trains from `trainer.step` to the configured step count, evaluating on
/// the held-out split before training, every `eval_every` steps and at the
/// end.
pub fn train(mut trainer: Trainer) -> Result<TrainOutcome> {
    let total = trainer.config.train.steps;
    let every = trainer.config.train.eval_every;
    let mut metrics_tsv = format!("{METRICS_HEADER}\n");
    let mut eval_tsv = format!("{EVAL_HEADER}\n");
    let initial = trainer.evaluate()?;
    let _ = writeln!(eval_tsv, "{}", eval_row(trainer.step, &initial));
    let mut last = initial;
    let mut losses = Vec::new();
    while trainer.step < total {
        let lr = trainer.lr();
        let step = trainer.step;
        let terms = trainer.train_step()?;
        let _ = writeln!(metrics_tsv, "{}", metrics_row(step, &terms, lr));
        losses.push(terms);
        if trainer.step == total || (every > 0 && trainer.step.is_multiple_of(every)) {
            last = trainer.evaluate()?;
            let _ = writeln!(eval_tsv, "{}", eval_row(trainer.step, &last));
            log::info!("step {}: loss {:.4}, held-out mAP {:.4}", trainer.step, terms.total, last.map);
        }
    }
    Ok(TrainOutcome { initial, last, losses, metrics_tsv, eval_tsv, trainer })
}

/// Trailing moving average with window `w` (defined from index `w - 1` on).
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || xs.len() < w {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(xs.len() + 1 - w);
    let mut acc: f64 = xs[..w].iter().sum();
    out.push(acc / w as f64);
    for i in w..xs.len() {
        acc += xs[i] - xs[i - w];
        out.push(acc / w as f64);
    }
    out
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: &'static str,
    pub variant: Variant,
    pub trainable: usize,
    pub initial: RetrievalReport,
    pub last: RetrievalReport,
    pub final_loss: f64,
}

/// Trains every ablation row from the same seed and data.
pub fn ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (label, variant) in Variant::ABLATION {
        let trainer = Trainer::new(cfg, variant)?;
        let trainable = trainer.store.trainable_count();
        let out = train(trainer)?;
        let final_loss = out.losses.last().map_or(f64::NAN, |t| t.total);
        rows.push(AblationRow { label, variant, trainable, initial: out.initial, last: out.last, final_loss });
        log::info!("ablation row {label} done: mAP {:.4}", out.last.map);
    }
    Ok(rows)
}

fn mark(on: bool) -> &'static str {
    if on {
        "yes"
    } else {
        "-"
    }
}

/// Rows in the component-comparison layout: one line per model with its
/// switches, trainable-parameter count and held-out metrics.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<6} {:>4} {:>4} {:>4} {:>10} {:>8} {:>8} {:>7} {:>7} {:>7}",
        "Model", "PFA", "SRP", "MA", "Params", "mAP@0", "mAP", "R-1", "R-5", "R-10"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<6} {:>4} {:>4} {:>4} {:>10} {:>8.4} {:>8.4} {:>7.4} {:>7.4} {:>7.4}",
            r.label,
            mark(r.variant.pfa),
            mark(r.variant.srp),
            mark(r.variant.ma),
            r.trainable,
            r.initial.map,
            r.last.map,
            r.last.cmc[0],
            r.last.cmc[1],
            r.last.cmc[2]
        );
    }
    s
}

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut s = String::from("model\tpfa\tsrp\tma\ttrainable\tmAP_init\tmAP\tR1\tR5\tR10\tfinal_loss\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:e}",
            r.label,
            r.variant.pfa,
            r.variant.srp,
            r.variant.ma,
            r.trainable,
            r.initial.map,
            r.last.map,
            r.last.cmc[0],
            r.last.cmc[1],
            r.last.cmc[2],
            r.final_loss
        );
    }
    s
}

/// `metric  value` lines of one retrieval report.
pub fn report_tsv(r: &RetrievalReport) -> String {
    let mut s = String::from("metric\tvalue\n");
    let _ = writeln!(s, "mAP\t{:.6}", r.map);
    for (k, v) in CMC_RANKS.iter().zip(r.cmc) {
        let _ = writeln!(s, "R{k}\t{v:.6}");
    }
    let _ = writeln!(s, "queries\t{}", r.evaluated);
    let _ = writeln!(s, "skipped\t{}", r.skipped);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small() -> RunConfig {
        let mut c = RunConfig::toy();
        c.backbone.dim = 8;
        c.backbone.heads = 2;
        c.backbone.channels = 1;
        c.backbone.img_h = 8;
        c.backbone.img_w = 8;
        c.backbone.patch = 4;
        c.srp.prompts = 2;
        c.ma.blocks = 1;
        c.ma.d_state = 2;
        c.ma.dt_rank = 2;
        c.data.num_ids = 4;
        c.data.eval_ids = 3;
        c.data.instances_per_id = 4;
        c.data.latent = 4;
        c.train.p = 2;
        c.train.k = 2;
        c.train.steps = 6;
        c.train.eval_every = 3;
        c
    }

    #[test]
    fn moving_average_windows() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
    }

    #[test]
    fn training_is_deterministic_and_leaves_frozen_params() {
        let cfg = small();
        let a = train(Trainer::new(&cfg, Variant::FULL).unwrap()).unwrap();
        let b = train(Trainer::new(&cfg, Variant::FULL).unwrap()).unwrap();
        assert_eq!(a.metrics_tsv, b.metrics_tsv);
        assert_eq!(a.eval_tsv, b.eval_tsv);
        assert_eq!(a.metrics_tsv.lines().count(), 7);
        assert_eq!(a.eval_tsv.lines().count(), 4);

        let fresh = Trainer::new(&cfg, Variant::FULL).unwrap();
        for (id, p) in fresh.store.iter() {
            let after = a.trainer.store.value(id);
            match p.kind {
                crate::param::ParamKind::Frozen => assert_eq!(after, &p.value, "{}", p.name),
                crate::param::ParamKind::Trainable if p.name.starts_with("head.") => assert_ne!(after, &p.value),
                _ => {}
            }
        }
    }

    #[test]
    fn resume_reproduces_the_next_step_bitwise() {
        let cfg = small();
        let mut straight = Trainer::new(&cfg, Variant::FULL).unwrap();
        for _ in 0..3 {
            straight.train_step().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        straight.save(dir.path()).unwrap();
        let next = straight.train_step().unwrap();

        let mut resumed = Trainer::resume(dir.path()).unwrap();
        assert_eq!(resumed.step, 3);
        let again = resumed.train_step().unwrap();
        assert_eq!(next.total.to_bits(), again.total.to_bits());
        for (id, p) in straight.store.iter() {
            assert_eq!(resumed.store.value(id), &p.value, "{}", p.name);
        }
    }

    #[test]
    fn ablation_rows_and_parameter_ordering() {
        let mut cfg = small();
        cfg.train.steps = 2;
        let rows = ablate(&cfg).unwrap();
        assert_eq!(rows.len(), 5);
        let fresh = Trainer::new(&cfg, Variant::ABLATION[0].1).unwrap();
        assert_eq!(rows[0].trainable, fresh.model.heads.params().iter().map(|&id| fresh.store.value(id).numel()).sum());
        let count = |l: &str| rows.iter().find(|r| r.label == l).unwrap().trainable;
        assert!(count("C") < count("E") && count("E") < count("F"));
        let table = ablation_table(&rows);
        assert_eq!(table.lines().count(), 6);
        assert!(table.lines().nth(1).unwrap().starts_with("A "));
    }
}
