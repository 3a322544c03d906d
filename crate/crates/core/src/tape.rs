//! Reverse-mode differentiation over a dynamically recorded operation tape.
//!
//! Every op appends a node holding its output value, its parents and a
//! backward closure. [`Tape::gradients`] walks the nodes in reverse order and
//! [`Tape::backward`] folds the parameter gradients into a [`ParamStore`].

use std::cell::Cell;
use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Every differentiable operation the tape can record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Linear,
    Add,
    Mul,
    Scale,
    LayerNorm,
    BatchNormTrain,
    BatchNormEval,
    Gelu,
    Silu,
    Softplus,
    DwConv1d,
    Attention,
    Interleave,
    Pick,
    TileCols,
    ConcatRows,
    SegmentMean,
    WeightedSum,
    SelectiveScan,
    CrossEntropySmooth,
    TripletBatchHard,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::Linear,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::LayerNorm,
        OpKind::BatchNormTrain,
        OpKind::BatchNormEval,
        OpKind::Gelu,
        OpKind::Silu,
        OpKind::Softplus,
        OpKind::DwConv1d,
        OpKind::Attention,
        OpKind::Interleave,
        OpKind::Pick,
        OpKind::TileCols,
        OpKind::ConcatRows,
        OpKind::SegmentMean,
        OpKind::WeightedSum,
        OpKind::SelectiveScan,
        OpKind::CrossEntropySmooth,
        OpKind::TripletBatchHard,
    ];

    pub fn parse(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|op| op.name() == name)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Linear => "linear",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::LayerNorm => "layer_norm",
            OpKind::BatchNormTrain => "batch_norm_train",
            OpKind::BatchNormEval => "batch_norm_eval",
            OpKind::Gelu => "gelu",
            OpKind::Silu => "silu",
            OpKind::Softplus => "softplus",
            OpKind::DwConv1d => "dwconv1d",
            OpKind::Attention => "attention",
            OpKind::Interleave => "interleave",
            OpKind::Pick => "pick",
            OpKind::TileCols => "tile_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SegmentMean => "segment_mean",
            OpKind::WeightedSum => "weighted_sum",
            OpKind::SelectiveScan => "selective_scan",
            OpKind::CrossEntropySmooth => "ce_smooth",
            OpKind::TripletBatchHard => "triplet_batch_hard",
        }
    }
}

thread_local! {
    static FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Factor applied to the input gradients of a faulted op.
pub const FAULT_SCALE: f64 = 1.01;

/// Runs `f` with the backward pass of `op` deliberately corrupted on this
/// thread: every gradient it propagates is scaled by [`FAULT_SCALE`].
pub fn with_fault<T>(op: Option<OpKind>, f: impl FnOnce() -> T) -> T {
    let prev = FAULT.with(|c| c.replace(op));
    let out = f();
    FAULT.with(|c| c.set(prev));
    out
}

/// Inputs handed to a backward closure.
pub struct BackCtx<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// Which parents need a gradient; closures may skip the rest.
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackCtx<'_>) -> Vec<Option<Tensor>> + Send + Sync>;

struct Node {
    op: Option<OpKind>,
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new(), grad_enabled: true }
    }

    /// A tape that never records backward closures (inference only).
    pub fn no_grad() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        let id = Var(self.nodes.len());
        self.nodes.push(Node {
            op: None,
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.grad_enabled,
            param,
        });
        id
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false, None)
    }

    /// A differentiable leaf whose gradient can be read from [`Gradients`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true, None)
    }

    /// Binds a stored parameter; repeated binds of the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let trainable = store.kind(id) == ParamKind::Trainable;
        let v = self.leaf(store.value(id).clone(), trainable, Some(id));
        self.bound.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op node. The value must be finite.
    pub fn push(
        &mut self,
        op: OpKind,
        value: Tensor,
        parents: &[Var],
        backward: impl Fn(&BackCtx<'_>) -> Vec<Option<Tensor>> + Send + Sync + 'static,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let id = Var(self.nodes.len());
        self.nodes.push(Node {
            op: Some(op),
            value,
            parents: parents.to_vec(),
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
            requires_grad,
            param: None,
        });
        Ok(id)
    }

    /// Distinct op kinds recorded so far.
    pub fn recorded_ops(&self) -> BTreeSet<OpKind> {
        self.nodes.iter().filter_map(|n| n.op).collect()
    }

    /// Gradients of a scalar `loss` with respect to every node requiring one.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Invalid(format!("backward needs a scalar loss, got dims {:?}", root.value.dims())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.dims(), 1.0));
        let fault = FAULT.with(Cell::get);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let ctx = BackCtx {
                grad: &g,
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                output: &node.value,
                needs: node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect(),
            };
            let mut parent_grads = backward(&ctx);
            if fault.is_some() && fault == node.op {
                parent_grads = parent_grads.into_iter().map(|g| g.map(|g| g.scale(FAULT_SCALE))).collect();
            }
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                if !pg.is_finite() {
                    return Err(Error::NonFinite { op: node.op.map_or("leaf", |o| o.name()) });
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates `d loss / d param` into every trainable parameter bound on this tape.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Some(pid), Some(g)) = (node.param, grads.grads[i].as_ref()) {
                store.accumulate(pid, g);
            }
        }
        Ok(())
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2]));
        assert!(matches!(tape.gradients(x), Err(Error::Invalid(_))));
    }

    #[test]
    fn no_grad_tape_records_no_closures() {
        let mut tape = Tape::no_grad();
        let x = tape.input(Tensor::full(&[1], 2.0));
        let y = tape.scale(x, 3.0).unwrap();
        assert!(!tape.requires_grad(y));
        assert_eq!(tape.value(y).item(), 6.0);
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(&[1], f64::MAX));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn fault_scales_only_the_named_op() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::full(&[1], 2.0));
            let y = tape.scale(x, 3.0).unwrap();
            let z = tape.add(y, y).unwrap();
            tape.gradients(z).unwrap().get(x).unwrap().item()
        };
        assert_eq!(run(), 6.0);
        assert!((with_fault(Some(OpKind::Scale), run) - 6.0 * FAULT_SCALE).abs() < 1e-12);
        assert!((with_fault(Some(OpKind::Add), run) - 6.0 * FAULT_SCALE).abs() < 1e-12);
        assert_eq!(with_fault(Some(OpKind::Gelu), run), 6.0);
        assert_eq!(run(), 6.0);
    }

    #[test]
    fn param_binding_is_shared() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[1], 1.0), ParamKind::Trainable);
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        let s = tape.add(a, b).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(id).item(), 2.0);
    }
}
