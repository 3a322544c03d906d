//! Finite-difference gradient suite over every differentiable op and over
//! the composed model.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::BackboneConfig;
use crate::config::GradcheckConfig;
use crate::error::{Error, Result};
use crate::gradcheck::{check_inputs, check_params, FD_STEP};
use crate::mamba_agg::MaConfig;
use crate::model::{MambaPro, ModelConfig, Variant};
use crate::nn::Ctx;
use crate::objectives::LossConfig;
use crate::ops::{GeluKind, Padding};
use crate::param::{ParamId, ParamStore};
use crate::pfa::PfaConfig;
use crate::srp::SrpConfig;
use crate::ssm::{InputDiscretization, ScanMode, SsmOptions};
use crate::tape::{with_fault, OpKind, Tape, Var};
use crate::tensor::Tensor;

type CaseFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One op-level check: inputs and the function differentiated with respect to them.
pub struct OpCase {
    pub op: OpKind,
    pub inputs: Vec<Tensor>,
    pub f: CaseFn,
}

fn case(op: OpKind, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase { op, inputs, f: Box::new(f) }
}

/// The check for `op`. The match is exhaustive, so adding an op without a
/// case does not compile.
pub fn op_case(op: OpKind, rng: &mut ChaCha8Rng) -> OpCase {
    let mut r = |dims: &[usize]| Tensor::randn(dims, 1.0, rng);
    match op {
        OpKind::Linear => case(op, vec![r(&[3, 4]), r(&[5, 3]), r(&[5])], |t, v| t.linear(v[0], v[1], Some(v[2]))),
        OpKind::Add => case(op, vec![r(&[3, 4]), r(&[3, 4]), r(&[3, 2])], |t, v| {
            let s = t.add(v[0], v[1])?;
            t.add(s, v[2])
        }),
        OpKind::Mul => case(op, vec![r(&[3, 4]), r(&[3, 4])], |t, v| t.mul(v[0], v[1])),
        OpKind::Scale => case(op, vec![r(&[3, 4])], |t, v| t.scale(v[0], -1.7)),
        OpKind::LayerNorm => case(op, vec![r(&[5, 4]), r(&[5]), r(&[5])], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        OpKind::BatchNormTrain => {
            case(op, vec![r(&[4, 6]), r(&[4]), r(&[4])], |t, v| t.batch_norm_train(v[0], v[1], v[2], 1e-5))
        }
        OpKind::BatchNormEval => {
            let mean = r(&[4]);
            let var = r(&[4]).map(|x| 0.5 + x * x);
            case(op, vec![r(&[4, 6]), r(&[4]), r(&[4])], move |t, v| {
                t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)
            })
        }
        OpKind::Gelu => case(op, vec![r(&[4, 5])], |t, v| {
            let a = t.gelu(v[0], GeluKind::Tanh)?;
            let b = t.gelu(v[0], GeluKind::Erf)?;
            t.add(a, b)
        }),
        OpKind::Silu => case(op, vec![r(&[4, 5])], |t, v| t.silu(v[0])),
        OpKind::Softplus => case(op, vec![r(&[4, 5])], |t, v| t.softplus(v[0])),
        OpKind::DwConv1d => case(op, vec![r(&[3, 8]), r(&[3, 3])], |t, v| {
            let a = t.dwconv1d(v[0], v[1], 4, Padding::Same)?;
            let b = t.dwconv1d(v[0], v[1], 4, Padding::Causal)?;
            t.add(a, b)
        }),
        OpKind::Attention => {
            case(op, vec![r(&[4, 6]), r(&[4, 6]), r(&[4, 6])], |t, v| t.attention(v[0], v[1], v[2], 2, 3))
        }
        OpKind::Interleave => case(op, vec![r(&[2, 4]), r(&[2, 2]), r(&[2, 6])], |t, v| t.interleave(v, 2)),
        OpKind::Pick => case(op, vec![r(&[2, 6])], |t, v| {
            let a = t.pick(v[0], &[2, 1], 2, 0)?;
            let b = t.pick(v[0], &[2, 1], 2, 1)?;
            let b = t.tile_cols(b, 2)?;
            t.mul(a, b)
        }),
        OpKind::TileCols => case(op, vec![r(&[3, 2])], |t, v| t.tile_cols(v[0], 3)),
        OpKind::ConcatRows => case(op, vec![r(&[2, 3]), r(&[4, 3])], |t, v| t.concat_rows(v)),
        OpKind::SegmentMean => case(op, vec![r(&[3, 6])], |t, v| t.segment_mean(v[0], 3)),
        OpKind::WeightedSum => {
            let w = r(&[3, 4]);
            case(op, vec![r(&[3, 4])], move |t, v| t.weighted_sum(v[0], &w))
        }
        OpKind::SelectiveScan => {
            let inputs = vec![r(&[3, 6]), r(&[3, 6]), r(&[3, 2]).scale(0.5), r(&[2, 6]), r(&[2, 6]), r(&[3])];
            case(op, inputs, |t, v| {
                let delta = t.softplus(v[1])?;
                let mut out = None;
                for input in [InputDiscretization::Euler, InputDiscretization::Zoh] {
                    let opts = SsmOptions { input, scan: ScanMode::Fast };
                    let y = t.selective_scan(v[0], delta, v[2], v[3], v[4], v[5], 3, opts)?;
                    out = Some(match out {
                        Some(prev) => t.add(prev, y)?,
                        None => y,
                    });
                }
                Ok(out.expect("two variants"))
            })
        }
        OpKind::CrossEntropySmooth => case(op, vec![r(&[4, 6])], |t, v| t.ce_smooth(v[0], &[0, 3, 1, 1, 2, 0], 0.1)),
        OpKind::TripletBatchHard => case(op, vec![r(&[4, 6])], |t, v| {
            let labels = [0, 0, 1, 1, 2, 2];
            let hinge = t.triplet_batch_hard(v[0], &labels, 5.0, false)?;
            let soft = t.triplet_batch_hard(v[0], &labels, 0.3, true)?;
            t.add(hinge, soft)
        }),
    }
}

/// Outcome of one check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    /// The op under test; `None` for module-level checks.
    pub op: Option<OpKind>,
    /// Every op the check's forward pass recorded.
    pub recorded: BTreeSet<OpKind>,
    pub rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub tol: f64,
    pub results: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.pass) && self.uncovered().is_empty()
    }

    /// Differentiable ops that no op-level check exercised.
    pub fn uncovered(&self) -> Vec<OpKind> {
        let seen: BTreeSet<OpKind> = self.results.iter().filter_map(|r| r.op).collect();
        OpKind::ALL.into_iter().filter(|op| !seen.contains(op)).collect()
    }

    /// Worst relative error of every op over all checks that recorded it.
    pub fn max_rel_err_per_op(&self) -> BTreeMap<OpKind, f64> {
        let mut m = BTreeMap::new();
        for r in &self.results {
            for &op in &r.recorded {
                let e = m.entry(op).or_insert(0.0f64);
                *e = e.max(r.rel_err);
            }
        }
        m
    }

    pub fn max_rel_err(&self) -> f64 {
        self.results.iter().map(|r| r.rel_err).fold(0.0, f64::max)
    }

    /// `check  rel_err  status` rows followed by a coverage line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("check\trel_err\tstatus\n");
        for r in &self.results {
            let _ = writeln!(s, "{}\t{:.3e}\t{}", r.name, r.rel_err, if r.pass { "ok" } else { "FAIL" });
        }
        let missing: Vec<&str> = self.uncovered().iter().map(|o| o.name()).collect();
        let _ = writeln!(
            s,
            "# coverage {}/{} ops{}",
            OpKind::ALL.len() - missing.len(),
            OpKind::ALL.len(),
            if missing.is_empty() { String::new() } else { format!(", missing: {}", missing.join(",")) }
        );
        s
    }
}

/// Desk-scale model used by the composed checks.
pub fn tiny_model_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            dim: 6,
            layers: 2,
            heads: 2,
            patch: 4,
            channels: 1,
            img_h: 8,
            img_w: 4,
            ..Default::default()
        },
        pfa: variant.pfa.then_some(PfaConfig::default()),
        srp: variant.srp.then_some(SrpConfig { prompts: 2, ..Default::default() }),
        ma: variant.ma.then_some(MaConfig { blocks: 1, d_state: 2, dt_rank: 2, ..Default::default() }),
        classes: 3,
    }
}

struct ModuleCase {
    name: &'static str,
    variant: Variant,
    select: fn(&MambaPro, &ParamStore) -> Vec<ParamId>,
}

const MODULE_CASES: [ModuleCase; 4] = [
    ModuleCase {
        name: "module:pfa",
        variant: Variant { pfa: true, srp: false, ma: false },
        select: |m, _| m.pfa.as_ref().map(|p| p.params()).unwrap_or_default(),
    },
    ModuleCase {
        name: "module:srp",
        variant: Variant { pfa: false, srp: true, ma: false },
        select: |m, _| m.bank.as_ref().map(|b| b.params()).unwrap_or_default(),
    },
    ModuleCase {
        name: "module:mamba_agg",
        variant: Variant { pfa: false, srp: false, ma: true },
        select: |m, _| m.ma.as_ref().map(|s| s.params()).unwrap_or_default(),
    },
    ModuleCase { name: "composed:loss", variant: Variant::FULL, select: |m, s| m.trainable(s) },
];

fn module_check(case: &ModuleCase, seed: u64, tol: f64) -> Result<CheckResult> {
    let cfg = tiny_model_config(case.variant);
    let mut store = ParamStore::new();
    let model = MambaPro::new(&mut store, cfg, seed)?;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if store.get(id).name.ends_with("dt_bias") {
            // unit-scale steps
            store.value_mut(id).data_mut().fill(0.5);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
    let images = [0, 1, 2].map(|_| Tensor::randn(&[4, 1, 8, 4], 1.0, &mut rng));
    let labels = [0, 0, 1, 1];
    let loss_cfg = LossConfig::default();
    let ids = (case.select)(&model, &store);
    let forward = |tape: &mut Tape, store: &ParamStore| -> Result<Var> {
        let mut cx = Ctx::new(tape, store, true);
        Ok(model.loss(&mut cx, &images, &labels, &loss_cfg)?.0)
    };
    let recorded = {
        let mut tape = Tape::new();
        forward(&mut tape, &store)?;
        tape.recorded_ops()
    };
    let rel_err = check_params(&mut store, &ids, FD_STEP, forward)?;
    Ok(CheckResult { name: case.name.into(), op: None, recorded, rel_err, pass: rel_err < tol })
}

/// Runs every op-level check and every module-level check.
pub fn run_suite(cfg: &GradcheckConfig, seed: u64) -> Result<SuiteReport> {
    let fault = match &cfg.break_op {
        Some(name) => {
            Some(OpKind::parse(name).ok_or_else(|| Error::Config(format!("gradcheck.break_op: unknown op {name:?}")))?)
        }
        None => None,
    };
    with_fault(fault, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut results = Vec::new();
        for op in OpKind::ALL {
            let c = op_case(op, &mut rng);
            let recorded = {
                let mut tape = Tape::new();
                let vars: Vec<Var> = c.inputs.iter().map(|t| tape.input(t.clone())).collect();
                (c.f)(&mut tape, &vars)?;
                tape.recorded_ops()
            };
            if !recorded.contains(&op) {
                return Err(Error::Invalid(format!("gradcheck case for {} does not record it", op.name())));
            }
            let rel_err = check_inputs(&c.inputs, FD_STEP, &c.f)?;
            results.push(CheckResult {
                name: op.name().into(),
                op: Some(op),
                recorded,
                rel_err,
                pass: rel_err < cfg.tol,
            });
        }
        for case in &MODULE_CASES {
            results.push(module_check(case, seed, cfg.tol)?);
        }
        Ok(SuiteReport { tol: cfg.tol, results })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_case_records_its_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for op in OpKind::ALL {
            let c = op_case(op, &mut rng);
            let mut tape = Tape::new();
            let vars: Vec<Var> = c.inputs.iter().map(|t| tape.input(t.clone())).collect();
            (c.f)(&mut tape, &vars).unwrap();
            assert!(tape.recorded_ops().contains(&op), "{}", op.name());
        }
    }

    #[test]
    fn broken_op_is_reported() {
        let cfg = GradcheckConfig { break_op: Some("silu".into()), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = op_case(OpKind::Silu, &mut rng);
        let err =
            with_fault(OpKind::parse(cfg.break_op.as_deref().unwrap()), || check_inputs(&c.inputs, FD_STEP, &c.f))
                .unwrap();
        assert!(err > 1e-3);
        let unknown = GradcheckConfig { break_op: Some("nope".into()), ..Default::default() };
        assert!(run_suite(&unknown, 0).is_err());
    }
}
