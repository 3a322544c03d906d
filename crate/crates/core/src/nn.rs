//! Parameterized building blocks composed by every model module.

use rand::Rng;

use crate::error::Result;
use crate::ops::{GeluKind, Padding};
use crate::param::{ParamId, ParamKind, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Forward-pass context: the tape being recorded, the parameter values and
/// the batch-norm statistics collected in training mode.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub training: bool,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, training: bool) -> Self {
        Self { tape, store, training, bn_updates: Vec::new() }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }
}

/// Creates parameters under a common name prefix.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub kind: ParamKind,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R, kind: ParamKind) -> Self {
        Self { store, rng, kind }
    }

    pub fn with_kind(&mut self, kind: ParamKind) -> Builder<'_, R> {
        Builder { store: self.store, rng: self.rng, kind }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store.add(name, value, self.kind)
    }

    pub fn normal(&mut self, name: &str, dims: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(dims, std, self.rng);
        self.tensor(name, t)
    }

    pub fn uniform(&mut self, name: &str, dims: &[usize], bound: f64) -> ParamId {
        let t = Tensor::uniform(dims, bound, self.rng);
        self.tensor(name, t)
    }
}

#[derive(Clone, Debug)]
pub struct LinearMap {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl LinearMap {
    /// Uniform `±1/sqrt(in)` init for weight and bias.
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, input: usize, output: usize, bias: bool) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = b.uniform(&format!("{name}.weight"), &[output, input], bound);
        let bias = bias.then(|| b.uniform(&format!("{name}.bias"), &[output], bound));
        Self { weight, bias }
    }

    pub fn zeros<R: Rng>(b: &mut Builder<'_, R>, name: &str, input: usize, output: usize, bias: bool) -> Self {
        let weight = b.tensor(&format!("{name}.weight"), Tensor::zeros(&[output, input]));
        let bias = bias.then(|| b.tensor(&format!("{name}.bias"), Tensor::zeros(&[output])));
        Self { weight, bias }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.tape.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.weight];
        v.extend(self.bias);
        v
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weight).dims()[1]
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weight).dims()[0]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, eps: f64) -> Self {
        Self {
            gain: b.tensor(&format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            shift: b.tensor(&format!("{name}.shift"), Tensor::zeros(&[dim])),
            eps,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = cx.param(self.gain);
        let s = cx.param(self.shift);
        cx.tape.layer_norm(x, g, s, self.eps)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gain, self.shift]
    }
}

/// Running statistics produced by a training-mode batch-norm pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl BnUpdate {
    /// `running <- (1 - momentum) * running + momentum * batch`.
    pub fn apply(&self, store: &mut ParamStore) {
        for (id, batch) in [(self.mean_id, &self.mean), (self.var_id, &self.var)] {
            for (r, b) in store.value_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (1.0 - self.momentum) * *r + self.momentum * b;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, eps: f64, momentum: f64) -> Self {
        let gain = b.tensor(&format!("{name}.gain"), Tensor::full(&[dim], 1.0));
        let shift = b.tensor(&format!("{name}.shift"), Tensor::zeros(&[dim]));
        let mut buf = b.with_kind(ParamKind::Buffer);
        let running_mean = buf.tensor(&format!("{name}.running_mean"), Tensor::zeros(&[dim]));
        let running_var = buf.tensor(&format!("{name}.running_var"), Tensor::full(&[dim], 1.0));
        Self { gain, shift, running_mean, running_var, eps, momentum }
    }

    /// Training mode normalizes with batch statistics over the token axis and
    /// records a running-stat update on `cx`; eval mode uses the running stats.
    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = cx.param(self.gain);
        let s = cx.param(self.shift);
        if cx.training {
            let y = cx.tape.batch_norm_train(x, g, s, self.eps)?;
            let (mean, var) = crate::ops::row_stats(cx.tape.value(x));
            cx.bn_updates.push(BnUpdate {
                mean_id: self.running_mean,
                var_id: self.running_var,
                mean,
                var,
                momentum: self.momentum,
            });
            Ok(y)
        } else {
            let rm = cx.store.value(self.running_mean).clone();
            let rv = cx.store.value(self.running_var).clone();
            cx.tape.batch_norm_eval(x, g, s, &rm, &rv, self.eps)
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gain, self.shift]
    }
}

/// Depth-wise convolution kernels, one per channel.
#[derive(Clone, Debug)]
pub struct DwConv {
    pub kernels: ParamId,
    pub padding: Padding,
}

impl DwConv {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, size: usize, padding: Padding) -> Self {
        let bound = 1.0 / (size as f64).sqrt();
        Self { kernels: b.uniform(&format!("{name}.kernels"), &[dim, size], bound), padding }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var, seg_len: usize) -> Result<Var> {
        let k = cx.param(self.kernels);
        cx.tape.dwconv1d(x, k, seg_len, self.padding)
    }
}

/// Multi-head self-attention with full visibility inside each segment.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub q: LinearMap,
    pub k: LinearMap,
    pub v: LinearMap,
    pub o: LinearMap,
    pub heads: usize,
}

impl Mhsa {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            q: LinearMap::new(b, &format!("{name}.q"), dim, dim, true),
            k: LinearMap::new(b, &format!("{name}.k"), dim, dim, true),
            v: LinearMap::new(b, &format!("{name}.v"), dim, dim, true),
            o: LinearMap::new(b, &format!("{name}.o"), dim, dim, true),
            heads,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var, seg_len: usize) -> Result<Var> {
        let q = self.q.forward(cx, x)?;
        let k = self.k.forward(cx, x)?;
        let v = self.v.forward(cx, x)?;
        let a = cx.tape.attention(q, k, v, self.heads, seg_len)?;
        self.o.forward(cx, a)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o].iter().flat_map(|l| l.params()).collect()
    }
}

/// Two linear maps with a GELU in between; used for FFNs, adapters and
/// prompt transfer blocks.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: LinearMap,
    pub fc2: LinearMap,
    pub gelu: GeluKind,
}

impl Mlp {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, hidden: usize, gelu: GeluKind) -> Self {
        Self {
            fc1: LinearMap::new(b, &format!("{name}.fc1"), dim, hidden, true),
            fc2: LinearMap::new(b, &format!("{name}.fc2"), hidden, dim, true),
            gelu,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.tape.gelu(h, self.gelu)?;
        self.fc2.forward(cx, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v
    }

    /// Overwrites every weight and bias with zeros.
    pub fn zero(&self, store: &mut ParamStore) {
        for id in self.params() {
            store.value_mut(id).data_mut().fill(0.0);
        }
    }
}

/// `linear(D -> rD) -> gelu -> linear(rD -> D)`.
pub type Ffn = Mlp;
