//! Label-smoothed cross-entropy and batch-hard triplet loss, applied to the
//! class-token features and to the aggregated features.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, LinearMap};
use crate::ops::{sigmoid, softplus};
use crate::param::ParamId;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

const DIST_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_ce: f64,
    pub lambda_tri: f64,
    pub smoothing: f64,
    pub margin: f64,
    /// `softplus(d_pos - d_neg)` instead of the hinge.
    pub soft_margin: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_ce: 0.25, lambda_tri: 1.0, smoothing: 0.1, margin: 0.3, soft_margin: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ce >= 0.0 && self.lambda_tri >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!("smoothing {} outside [0, 1)", self.smoothing)));
        }
        if self.margin < 0.0 || self.margin.is_nan() {
            return Err(Error::Config(format!("negative margin {}", self.margin)));
        }
        Ok(())
    }
}

/// Pairwise Euclidean distances between the columns of `x: [F, B]`.
pub fn pairwise_distances(x: &Tensor) -> Vec<f64> {
    let (f, b) = (x.rows(), x.cols());
    let mut d = vec![0.0; b * b];
    for i in 0..b {
        for j in i + 1..b {
            let sq: f64 = (0..f).map(|r| (x.at(r, i) - x.at(r, j)).powi(2)).sum();
            let v = sq.max(DIST_FLOOR).sqrt();
            d[i * b + j] = v;
            d[j * b + i] = v;
        }
    }
    d
}

/// Hardest positive and negative of every anchor (first index wins ties).
pub fn hardest_pairs(dist: &[f64], labels: &[usize]) -> Vec<(usize, usize)> {
    let b = labels.len();
    (0..b)
        .map(|a| {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..b {
                if j == a {
                    continue;
                }
                let d = dist[a * b + j];
                if labels[j] == labels[a] {
                    if pos.is_none_or(|p| d > dist[a * b + p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|n| d < dist[a * b + n]) {
                    neg = Some(j);
                }
            }
            (pos.expect("positive exists"), neg.expect("negative exists"))
        })
        .collect()
}

fn check_pk(labels: &[usize]) -> Result<()> {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 || counts.values().any(|&c| c < 2) {
        return Err(Error::Invalid("triplet mining needs at least two identities with two instances each".into()));
    }
    Ok(())
}

impl Tape {
    /// Mean over the batch of the cross-entropy between `softmax(logits)`
    /// (`[C, B]`) and `(1 - eps) onehot + eps / C`.
    pub fn ce_smooth(&mut self, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
        let (c, b) = (self.value(logits).rows(), self.value(logits).cols());
        if labels.len() != b {
            return Err(Error::Shape(format!("ce_smooth: {} labels for batch {b}", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Invalid(format!("ce_smooth: label {l} out of range for {c} classes")));
        }
        let z = self.value(logits);
        let mut probs = vec![0.0; c * b];
        let mut loss = 0.0;
        for s in 0..b {
            let col: Vec<f64> = (0..c).map(|r| z.at(r, s)).collect();
            let m = col.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let lse = m + col.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for r in 0..c {
                let q = eps / c as f64 + if r == labels[s] { 1.0 - eps } else { 0.0 };
                let logp = col[r] - lse;
                loss -= q * logp;
                probs[r * b + s] = logp.exp();
            }
        }
        let labels = labels.to_vec();
        self.push(OpKind::CrossEntropySmooth, Tensor::scalar(loss / b as f64), &[logits], move |ctx| {
            let g = ctx.grad.item() / b as f64;
            let grad = Tensor::from_fn(&[c, b], |i| {
                let (r, s) = (i / b, i % b);
                let q = eps / c as f64 + if r == labels[s] { 1.0 - eps } else { 0.0 };
                g * (probs[i] - q)
            });
            vec![Some(grad)]
        })
    }

    /// Batch-hard triplet loss on the columns of `emb: [F, B]`.
    pub fn triplet_batch_hard(&mut self, emb: Var, labels: &[usize], margin: f64, soft: bool) -> Result<Var> {
        let x = self.value(emb).clone();
        let (f, b) = (x.rows(), x.cols());
        if labels.len() != b {
            return Err(Error::Shape(format!("triplet: {} labels for batch {b}", labels.len())));
        }
        check_pk(labels)?;
        let dist = pairwise_distances(&x);
        let pairs = hardest_pairs(&dist, labels);
        // per anchor: d(loss_a)/d(d_pos - d_neg)
        let mut slopes = Vec::with_capacity(b);
        let mut loss = 0.0;
        for (a, &(p, n)) in pairs.iter().enumerate() {
            let gap = dist[a * b + p] - dist[a * b + n];
            if soft {
                loss += softplus(gap);
                slopes.push(sigmoid(gap));
            } else {
                let v = gap + margin;
                loss += v.max(0.0);
                slopes.push(if v > 0.0 { 1.0 } else { 0.0 });
            }
        }
        self.push(OpKind::TripletBatchHard, Tensor::scalar(loss / b as f64), &[emb], move |ctx| {
            let g = ctx.grad.item() / b as f64;
            let mut dx = vec![0.0; f * b];
            let mut pull = |a: usize, j: usize, w: f64| {
                let d = dist[a * b + j];
                let sq: f64 = (0..f).map(|r| (x.at(r, a) - x.at(r, j)).powi(2)).sum();
                if sq <= DIST_FLOOR {
                    return;
                }
                for r in 0..f {
                    let u = w * (x.at(r, a) - x.at(r, j)) / d;
                    dx[r * b + a] += u;
                    dx[r * b + j] -= u;
                }
            };
            for (a, &(p, n)) in pairs.iter().enumerate() {
                let w = g * slopes[a];
                if w != 0.0 {
                    pull(a, p, w);
                    pull(a, n, -w);
                }
            }
            vec![Some(Tensor::from_parts(vec![f, b], dx))]
        })
    }
}

/// Features and labels at both supervision points.
#[derive(Clone, Debug)]
pub struct SupervisionBatch {
    /// `[3D, B]` concatenated class tokens.
    pub f_cls: Var,
    /// `[3D, B]` aggregated features, absent when aggregation is disabled.
    pub f_ma: Option<Var>,
    pub labels: Vec<usize>,
}

/// Independent identity classifiers for the two supervision points.
#[derive(Clone, Debug)]
pub struct ClassifierHeads {
    pub clip: LinearMap,
    pub ma: Option<LinearMap>,
}

impl ClassifierHeads {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, feat: usize, classes: usize, with_ma: bool) -> Self {
        Self {
            clip: LinearMap::new(b, "head.clip", feat, classes, false),
            ma: with_ma.then(|| LinearMap::new(b, "head.ma", feat, classes, false)),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.clip.params();
        if let Some(m) = &self.ma {
            v.extend(m.params());
        }
        v
    }
}

/// Individual loss terms of one batch, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub ce_clip: f64,
    pub tri_clip: f64,
    pub ce_ma: f64,
    pub tri_ma: f64,
    pub total: f64,
}

fn weighted(cx: &mut Ctx<'_>, ce: Var, tri: Var, cfg: &LossConfig) -> Result<Var> {
    let a = cx.tape.scale(ce, cfg.lambda_ce)?;
    let b = cx.tape.scale(tri, cfg.lambda_tri)?;
    cx.tape.add(a, b)
}

/// `λ1 CE + λ2 Tri` on the class-token features, plus the same on the
/// aggregated features when present.
pub fn total_loss(
    cx: &mut Ctx<'_>,
    batch: &SupervisionBatch,
    heads: &ClassifierHeads,
    cfg: &LossConfig,
) -> Result<(Var, LossTerms)> {
    let mut terms = LossTerms::default();
    let logits = heads.clip.forward(cx, batch.f_cls)?;
    let ce = cx.tape.ce_smooth(logits, &batch.labels, cfg.smoothing)?;
    let tri = cx.tape.triplet_batch_hard(batch.f_cls, &batch.labels, cfg.margin, cfg.soft_margin)?;
    terms.ce_clip = cx.value(ce).item();
    terms.tri_clip = cx.value(tri).item();
    let mut total = weighted(cx, ce, tri, cfg)?;
    if let (Some(f_ma), Some(head)) = (batch.f_ma, &heads.ma) {
        let logits = head.forward(cx, f_ma)?;
        let ce = cx.tape.ce_smooth(logits, &batch.labels, cfg.smoothing)?;
        let tri = cx.tape.triplet_batch_hard(f_ma, &batch.labels, cfg.margin, cfg.soft_margin)?;
        terms.ce_ma = cx.value(ce).item();
        terms.tri_ma = cx.value(tri).item();
        let ma = weighted(cx, ce, tri, cfg)?;
        total = cx.tape.add(total, ma)?;
    }
    terms.total = cx.value(total).item();
    Ok((total, terms))
}
