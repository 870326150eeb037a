//! Tape-based reverse-mode differentiation.
//!
//! Every primitive applied through a [`Tape`] evaluates eagerly and appends a
//! node holding its value and the information its backward rule needs. Nodes
//! are only ever appended, so the tape is topologically ordered by
//! construction and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use kavi_core::autodiff::Tape;
//! use kavi_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]).with_grad()).unwrap();
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
//! ```

mod backward;
mod gradcheck;
mod kernels;
mod ops;

pub use gradcheck::{grad_check, GradCheckReport, REL_ERR_FLOOR};
pub use ops::BatchStats;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Softmax(Var),
    LogSoftmax(Var),
    Transpose(Var),
    Reshape(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    Conv1d(Box<kernels::ConvSaved>),
    BatchNorm(Box<kernels::BnSaved>),
    MaxPool1d { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    PairwiseSqDist(Var, Var),
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Records primitive applications for one forward pass.
#[derive(Debug)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    strict: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A strict tape: every recorded value is checked for NaN/Inf.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            strict: true,
            consumed: false,
        }
    }

    pub fn with_strict(strict: bool) -> Self {
        Self {
            strict,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it participates in differentiation iff
    /// `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push_leaf(t, t.requires_grad)
    }

    /// Records a leaf that always requires grad.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        self.push_leaf(t, true)
    }

    /// Records a leaf that never requires grad.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, t: &Tensor, requires_grad: bool) -> Result<Var> {
        if self.strict && !t.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push_raw(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad))
    }

    /// Copies `v` into a new constant leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push_raw(shape, value, Op::Leaf, false)
    }

    pub(crate) fn push_raw(
        &mut self,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if self.strict && value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(shape, value, op, rg))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::shape("scalar", format!("shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    /// Gradient of the last backward root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Tape::grad`], but zeros when no gradient reached `v`.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()])
    }

    /// Populates gradients of `root` with respect to every node that
    /// requires grad. A tape can be differentiated once.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Backward(
                "tape already consumed; record a new forward pass".into(),
            ));
        }
        let node = self
            .nodes
            .get(root.0)
            .ok_or_else(|| Error::Backward("unknown root".into()))?;
        if node.value.len() != 1 {
            return Err(Error::Backward(format!(
                "root must be scalar, got shape {:?}",
                node.shape
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !node.requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward::propagate(&self.nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

/// Accumulates into the gradient slot of `v`, allocating zeros on first use.
/// Skips inputs that do not require grad.
pub(crate) fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let len = nodes[v.0].value.len();
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}
