//! Dense 64-bit tensors with tape-based reverse-mode differentiation.
//!
//! The tensor is deliberately minimal: contiguous row-major `f64` storage,
//! explicit shapes, no broadcasting beyond scalar-with-tensor. Every
//! differentiable operation records itself on a thread-local tape;
//! [`Tensor::backward`] replays the tape in reverse and deposits gradients on
//! the `requires_grad` leaves. The tape is consumed by `backward`, so one
//! forward pass supports one backward pass.

mod ops;

pub use ops::concat;

use crate::counters;
use std::cell::{Cell, Ref, RefCell};
use std::rc::{Rc, Weak};
use thiserror::Error;

/// Errors from tensor construction and operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch: {left:?} vs {right:?} in {op}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("matmul inner dimensions disagree: {0} vs {1}")]
    InnerDim(usize, usize),
    #[error("{op} expects rank-{expected} input, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("reshape from {from:?} to {to:?} changes element count")]
    ReshapeCount { from: Vec<usize>, to: Vec<usize> },
    #[error("permutation {perm:?} is not a valid axis order for shape {shape:?}")]
    BadPermutation { perm: Vec<usize>, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("gather index {index} out of range for {len} source elements")]
    GatherIndex { index: i64, len: usize },
    #[error("concat: {0}")]
    Concat(String),
}

pub type TensorResult<T> = Result<T, TensorError>;

pub(crate) struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    /// Tape slot for the current generation, if this tensor participates.
    node: Cell<Option<(u64, usize)>>,
    /// Counts toward the patch-buffer live/peak gauges while alive.
    tracked: bool,
}

impl Drop for Inner {
    fn drop(&mut self) {
        if self.tracked {
            counters::patch_free(self.data.borrow().len() as u64);
        }
    }
}

/// Dense row-major f64 tensor handle. Cloning is cheap (shared storage).
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, tracked: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if tracked {
            counters::patch_alloc(data.len() as u64);
        }
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                node: Cell::new(None),
                tracked,
            }),
        }
    }

    /// A constant tensor from explicit shape and row-major data.
    pub fn new(shape: &[usize], data: Vec<f64>) -> TensorResult<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor::build(shape.to_vec(), data, false, false))
    }

    /// A learnable leaf: gradients accumulate here after `backward`.
    pub fn param(shape: &[usize], data: Vec<f64>) -> TensorResult<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor::build(shape.to_vec(), data, true, false))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::build(shape.to_vec(), vec![0.0; shape.iter().product()], false, false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::build(shape.to_vec(), vec![value; shape.iter().product()], false, false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::build(vec![1], vec![value], false, false)
    }

    /// Constant tensor whose allocation counts toward the patch-buffer gauges.
    pub(crate) fn new_tracked(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::build(shape, data, false, true)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Borrow the underlying storage.
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor with {} elements", d.len());
        d[0]
    }

    /// Accumulated gradient, if `backward` has deposited one.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrite the stored values in place (optimizer step). Length-checked.
    pub fn set_data(&self, data: Vec<f64>) {
        assert_eq!(data.len(), self.numel(), "set_data length mismatch");
        *self.inner.data.borrow_mut() = data;
    }

    /// Same values, cut loose from the tape; gradients will not flow past it.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.inner.shape.clone(), self.to_vec(), false, false)
    }

    /// True when every stored value is finite.
    pub fn is_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    /// Populate `grad` on every `requires_grad` leaf reachable from this
    /// scalar. Consumes the tape. A constant (untaped) scalar is a no-op:
    /// leaves keep whatever gradient they already hold (zero by default).
    pub fn backward(&self) -> TensorResult<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.inner.shape.clone()));
        }
        tape_backward(self);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// Backward rule: given dLoss/dOutput, produce dLoss/dParent for each parent,
/// in the same order as the node's parent list.
type BackFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    parents: Vec<usize>,
    backward: Option<BackFn>,
    /// Leaf nodes deposit their accumulated gradient here.
    leaf: Option<Weak<Inner>>,
    numel: usize,
}

struct Tape {
    gen: u64,
    enabled: bool,
    nodes: Vec<Node>,
}

thread_local! {
    static TAPE: RefCell<Tape> = const {
        RefCell::new(Tape { gen: 0, enabled: true, nodes: Vec::new() })
    };
}

/// Run `f` with gradient recording disabled on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = TAPE.with(|t| {
        let mut t = t.borrow_mut();
        std::mem::replace(&mut t.enabled, false)
    });
    let out = f();
    TAPE.with(|t| t.borrow_mut().enabled = prev);
    out
}

pub fn grad_enabled() -> bool {
    TAPE.with(|t| t.borrow().enabled)
}

fn node_id_for(t: &Tensor, tape: &mut Tape) -> Option<usize> {
    if let Some((gen, id)) = t.inner.node.get() {
        if gen == tape.gen {
            return Some(id);
        }
    }
    if t.inner.requires_grad {
        let id = tape.nodes.len();
        tape.nodes.push(Node {
            parents: Vec::new(),
            backward: None,
            leaf: Some(Rc::downgrade(&t.inner)),
            numel: t.numel(),
        });
        t.inner.node.set(Some((tape.gen, id)));
        return Some(id);
    }
    None
}

/// Record `out = op(inputs)` if the tape is enabled and any input is live.
/// `back` receives dLoss/dOut and must return one gradient per *live* parent,
/// ordered as in `inputs`; entries for dead parents are still returned (the
/// closure cannot know which are live) and simply dropped.
pub(crate) fn record(inputs: &[&Tensor], out: &Tensor, back: BackFn) {
    TAPE.with(|t| {
        let mut tape = t.borrow_mut();
        if !tape.enabled {
            return;
        }
        let tape = &mut *tape;
        let ids: Vec<Option<usize>> = inputs.iter().map(|i| node_id_for(i, tape)).collect();
        if ids.iter().all(|i| i.is_none()) {
            return;
        }
        let id = tape.nodes.len();
        let live: Vec<Option<usize>> = ids.clone();
        let back = Box::new(move |g: &[f64]| {
            let grads = back(g);
            debug_assert_eq!(grads.len(), live.len());
            grads
        });
        tape.nodes.push(Node {
            parents: ids.iter().map(|i| i.unwrap_or(usize::MAX)).collect(),
            backward: Some(back),
            leaf: None,
            numel: out.numel(),
        });
        out.inner.node.set(Some((tape.gen, id)));
    });
}

fn tape_backward(loss: &Tensor) {
    TAPE.with(|t| {
        let mut tape = t.borrow_mut();
        let Some((gen, loss_id)) = loss.inner.node.get() else {
            return; // constant loss: nothing depends on any leaf
        };
        if gen != tape.gen {
            return; // stale node from a consumed tape
        }
        let n = tape.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss_id] = Some(vec![1.0]);
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &tape.nodes[id];
            debug_assert_eq!(g.len(), node.numel);
            if let Some(back) = &node.backward {
                let contribs = back(&g);
                for (slot, contrib) in node.parents.iter().zip(contribs) {
                    if *slot == usize::MAX {
                        continue;
                    }
                    match &mut grads[*slot] {
                        Some(acc) => {
                            for (a, c) in acc.iter_mut().zip(&contrib) {
                                *a += c;
                            }
                        }
                        empty => *empty = Some(contrib),
                    }
                }
            } else if let Some(leaf) = &node.leaf {
                if let Some(inner) = leaf.upgrade() {
                    let mut slot = inner.grad.borrow_mut();
                    match &mut *slot {
                        Some(acc) => {
                            for (a, c) in acc.iter_mut().zip(&g) {
                                *a += c;
                            }
                        }
                        empty => *empty = Some(g),
                    }
                }
            }
        }
        tape.nodes.clear();
        tape.gen += 1;
    });
}

/// Number of nodes currently recorded (test hook).
#[cfg(test)]
pub(crate) fn tape_len() -> usize {
    TAPE.with(|t| t.borrow().nodes.len())
}
