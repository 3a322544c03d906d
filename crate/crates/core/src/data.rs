//! Synthetic tri-modal identities and PK batch sampling.
//!
//! Every identity owns a latent vector `z ~ N(0, I)`. An instance draws, per
//! modality, `u = ρ z + sqrt(1 - ρ²) ε` and renders
//! `image = reshape(W_m u) + pattern_m(a) + σ · noise`, where `W_m` is fixed
//! per modality and `pattern_m(a) = P_m0 + Σ_j a_j P_mj` mixes fixed
//! modality patterns with capture coefficients `a ~ N(0, κ² I)` drawn once
//! per instance and shared by its three modalities. The modalities of one
//! instance share `z` but see it through different maps and independent
//! nuisances, so combining them identifies the instance better than any one
//! of them; the capture term carries no identity and has to be learned away.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Triplet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_ids: usize,
    pub instances_per_id: usize,
    /// Identities of the held-out split, disjoint from the training ones.
    pub eval_ids: usize,
    pub channels: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub latent: usize,
    pub cameras: usize,
    pub rho: f64,
    pub sigma: f64,
    /// Number of capture patterns per modality.
    pub capture_dim: usize,
    /// Scale `κ` of the capture coefficients.
    pub capture: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_ids: 16,
            instances_per_id: 8,
            eval_ids: 16,
            channels: 3,
            img_h: 32,
            img_w: 16,
            latent: 16,
            cameras: 2,
            rho: 0.8,
            sigma: 0.3,
            capture_dim: 4,
            capture: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("data.rho must lie in [0, 1], got {}", self.rho)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("data.sigma must be non-negative, got {}", self.sigma)));
        }
        if !(self.capture >= 0.0 && self.capture.is_finite()) {
            return Err(Error::Config(format!("data.capture must be non-negative, got {}", self.capture)));
        }
        if self.num_ids < 2 || self.instances_per_id < 2 {
            return Err(Error::Config("need at least 2 identities with 2 instances each".into()));
        }
        if self.channels == 0 || self.img_h == 0 || self.img_w == 0 || self.latent == 0 || self.cameras == 0 {
            return Err(Error::Config("synthetic dims must be positive".into()));
        }
        Ok(())
    }

    fn pixels(&self) -> usize {
        self.channels * self.img_h * self.img_w
    }

    pub fn generate(&self) -> Result<Synthetic> {
        self.validate()?;
        let px = self.pixels();
        let mut world = stream(self.seed, 0);
        let views: Vec<Tensor> =
            (0..3).map(|_| Tensor::randn(&[px, self.latent], 1.0 / (self.latent as f64).sqrt(), &mut world)).collect();
        let patterns: Vec<Tensor> =
            (0..3).map(|_| Tensor::randn(&[1 + self.capture_dim, px], 0.5, &mut world)).collect();
        let train = self.split(&views, &patterns, self.num_ids, &mut stream(self.seed, 1));
        let eval = self.split(&views, &patterns, self.eval_ids, &mut stream(self.seed, 2));
        Ok(Synthetic { spec: *self, train, eval })
    }

    fn split(&self, views: &[Tensor], patterns: &[Tensor], ids: usize, rng: &mut ChaCha8Rng) -> Dataset {
        let px = self.pixels();
        let n = ids * self.instances_per_id;
        let mix = (1.0 - self.rho * self.rho).max(0.0).sqrt();
        let mut pixels: [Vec<f64>; 3] = std::array::from_fn(|_| Vec::with_capacity(n * px));
        let mut labels = Vec::with_capacity(n);
        let mut cameras = Vec::with_capacity(n);
        for id in 0..ids {
            let z = Tensor::randn(&[self.latent], 1.0, rng);
            for inst in 0..self.instances_per_id {
                let a = Tensor::randn(&[self.capture_dim], self.capture, rng);
                for m in 0..3 {
                    let eps = Tensor::randn(&[self.latent], 1.0, rng);
                    let u: Vec<f64> = z.data().iter().zip(eps.data()).map(|(z, e)| self.rho * z + mix * e).collect();
                    let noise = Tensor::randn(&[px], self.sigma, rng);
                    let mut img = patterns[m].row(0).to_vec();
                    for (j, aj) in a.data().iter().enumerate() {
                        for (v, pj) in img.iter_mut().zip(patterns[m].row(j + 1)) {
                            *v += aj * pj;
                        }
                    }
                    let w = &views[m];
                    for (p, v) in img.iter_mut().enumerate() {
                        let dot: f64 = w.row(p).iter().zip(&u).map(|(a, b)| a * b).sum();
                        *v += dot + noise.data()[p];
                    }
                    pixels[m].extend(img);
                }
                labels.push(id);
                cameras.push(inst % self.cameras);
            }
        }
        Dataset { pixels, labels, cameras, sample_dims: [self.channels, self.img_h, self.img_w] }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

pub struct Synthetic {
    pub spec: SyntheticSpec,
    pub train: Dataset,
    pub eval: Dataset,
}

/// Samples of one split; sample `i` of modality `m` is
/// `pixels[m][i * C·H·W ..]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pixels: [Vec<f64>; 3],
    pub labels: Vec<usize>,
    pub cameras: Vec<usize>,
    sample_dims: [usize; 3],
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_ids(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Images `[B, C, H, W]` of the given samples, per modality.
    pub fn gather(&self, indices: &[usize]) -> Triplet {
        let [c, h, w] = self.sample_dims;
        let px = c * h * w;
        std::array::from_fn(|m| {
            let mut data = Vec::with_capacity(indices.len() * px);
            for &i in indices {
                data.extend_from_slice(&self.pixels[m][i * px..(i + 1) * px]);
            }
            Tensor::new(vec![indices.len(), c, h, w], data).expect("gathered sizes are consistent")
        })
    }

    /// Sample indices grouped by identity.
    pub fn by_id(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_ids()];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }
}

/// Draws `p` identities and `k` instances of each per batch. The batch of a
/// given step depends only on `(seed, step)`, so a resumed run sees the same
/// batches as an uninterrupted one.
#[derive(Clone, Debug)]
pub struct PkSampler {
    groups: Vec<Vec<usize>>,
    pub p: usize,
    pub k: usize,
    seed: u64,
}

impl PkSampler {
    pub fn new(data: &Dataset, p: usize, k: usize, seed: u64) -> Result<Self> {
        let groups = data.by_id();
        if p < 2 || p > groups.len() {
            return Err(Error::Config(format!("train.p = {p} must lie in [2, {}]", groups.len())));
        }
        if k < 2 {
            return Err(Error::Config(format!("train.k = {k} must be at least 2")));
        }
        Ok(Self { groups, p, k, seed })
    }

    pub fn batch(&self, step: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        rng.set_stream(step);
        let mut ids: Vec<usize> = (0..self.groups.len()).collect();
        ids.shuffle(&mut rng);
        let mut out = Vec::with_capacity(self.p * self.k);
        for &id in &ids[..self.p] {
            let group = &self.groups[id];
            if group.len() >= self.k {
                out.extend(group.choose_multiple(&mut rng, self.k).copied());
            } else {
                out.extend((0..self.k).map(|_| *group.choose(&mut rng).expect("groups are non-empty")));
            }
        }
        out
    }
}
