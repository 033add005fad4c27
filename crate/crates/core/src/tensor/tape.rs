//! Reverse-mode tape.
//!
//! A `Tape` records every operation as a node holding the forward value and a
//! backward closure. `Var` is a lightweight handle (tape pointer + node id);
//! cloning it is free. Nodes are append-only, so reverse iteration order is a
//! valid topological order and `backward` is a single reverse sweep.
//!
//! Gradients flow only where they are needed: an op whose inputs are all
//! untracked records no closure, and closures skip untracked parents, so
//! running evaluation through a tape with constant leaves costs only the
//! forward kernels.

use super::Tensor;
use std::cell::RefCell;
use std::rc::Rc;

/// Accumulation buffers used during a backward sweep, indexed by node id.
pub(super) type GradBuf = Vec<Option<Vec<f64>>>;

pub(super) struct Node {
    pub value: Tensor,
    /// Set only for leaves created with `requires_grad`.
    pub grad: Option<Tensor>,
    pub is_grad_leaf: bool,
    pub backward: Option<Box<dyn Fn(&[f64], &mut GradBuf)>>,
}

impl Node {
    pub fn tracked(&self) -> bool {
        self.is_grad_leaf || self.backward.is_some()
    }
}

#[derive(Default)]
pub(super) struct TapeInner {
    pub nodes: Vec<Node>,
}

/// Records a computation for one backward pass. Create one per training step.
#[derive(Clone, Default)]
pub struct Tape {
    pub(super) inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a node on a tape.
#[derive(Clone)]
pub struct Var {
    pub(super) tape: Rc<RefCell<TapeInner>>,
    pub(super) idx: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Register an input. Gradient is accumulated only when `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            grad: None,
            is_grad_leaf: requires_grad,
            backward: None,
        });
        Var { tape: Rc::clone(&self.inner), idx: inner.nodes.len() - 1 }
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse sweep from `root`, which must be a tracked scalar. Fills the
    /// `grad` slot of every `requires_grad` leaf; the root's own adjoint is
    /// exactly 1.
    pub fn backward(&self, root: &Var) {
        assert!(
            Rc::ptr_eq(&self.inner, &root.tape),
            "backward root lives on a different tape"
        );
        let mut inner = self.inner.borrow_mut();
        let nodes = &mut inner.nodes;
        assert!(
            nodes[root.idx].value.is_scalar(),
            "backward root must be scalar, got shape {:?}",
            nodes[root.idx].value.shape()
        );
        assert!(nodes[root.idx].tracked(), "backward root is not tracked");

        let mut grads: GradBuf = vec![None; nodes.len()];
        grads[root.idx] = Some(vec![1.0]);
        for i in (0..=root.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(f) = &nodes[i].backward {
                f(&g, &mut grads);
            }
            if nodes[i].is_grad_leaf {
                let shape = nodes[i].value.shape().to_vec();
                nodes[i].grad = Some(Tensor::new(shape, g));
            }
        }
    }
}

impl Var {
    /// Forward value (shares storage with the node).
    pub fn value(&self) -> Tensor {
        self.tape.borrow().nodes[self.idx].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.borrow().nodes[self.idx].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Accumulated gradient after `Tape::backward`; `None` for non-leaves,
    /// untracked leaves, or leaves the root does not depend on.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.borrow().nodes[self.idx].grad.clone()
    }

    pub(super) fn tracked(&self) -> bool {
        self.tape.borrow().nodes[self.idx].tracked()
    }

    pub(super) fn same_tape(&self, other: &Var) -> bool {
        Rc::ptr_eq(&self.tape, &other.tape)
    }

    /// Append a node computing `value` from `self` (and optionally more
    /// parents, encoded in the closure).
    pub(super) fn push(&self, value: Tensor, backward: Option<Box<dyn Fn(&[f64], &mut GradBuf)>>) -> Var {
        let mut inner = self.tape.borrow_mut();
        inner.nodes.push(Node { value, grad: None, is_grad_leaf: false, backward });
        Var { tape: Rc::clone(&self.tape), idx: inner.nodes.len() - 1 }
    }

    /// New untracked constant on the same tape as `self`.
    pub fn constant_like(&self, value: Tensor) -> Var {
        self.push(value, None)
    }
}

/// Accumulate `contrib` into the buffer for node `idx`, initializing lazily.
pub(super) fn accumulate(grads: &mut GradBuf, idx: usize, numel: usize, contrib: impl Fn(&mut [f64])) {
    let slot = grads[idx].get_or_insert_with(|| vec![0.0; numel]);
    contrib(slot);
}

/// Borrow the buffer for node `idx`, zero-filled on first use (for kernels
/// that accumulate in place, e.g. GEMM with beta = 1).
pub(super) fn grad_slot(grads: &mut GradBuf, idx: usize, numel: usize) -> &mut [f64] {
    grads[idx].get_or_insert_with(|| vec![0.0; numel])
}
