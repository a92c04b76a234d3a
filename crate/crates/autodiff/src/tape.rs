//! Wengert-style tape for reverse-mode differentiation.
//!
//! Every differentiable op appends one node holding its output value, the
//! ids of its inputs and a backward closure mapping the output gradient to
//! input gradients. Node ids increase in execution order, so walking the
//! tape from the loss down to id 0 is a reverse topological traversal.

use std::cell::{Cell, RefCell};
use std::fmt;

use crate::error::{Result, TensorError};
use crate::{Float, Tensor};

pub(crate) type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Float> {
    value: Tensor<T>,
    parents: Vec<usize>,
    requires_grad: bool,
    is_leaf: bool,
    grad: Option<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Ordered record of executed ops. One tape serves exactly one backward pass.
pub struct Tape<T: Float = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Float = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Float> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Float> Copy for Var<'_, T> {}

impl<T: Float> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), consumed: Cell::new(false) }
    }

    /// Records a tracked leaf; it receives a gradient on [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Vec::new(), true, true, None)
    }

    /// Records an untracked input.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Vec::new(), false, true, None)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    /// Propagates `d loss / d node` to every tracked leaf and consumes the tape.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::TapeMismatch { op: "backward" });
        }
        if self.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        let mut nodes = self.nodes.borrow_mut();
        if nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let loss_value = &nodes[loss.id].value;
        if loss_value.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: loss_value.shape().to_vec() });
        }
        self.consumed.set(true);

        let seed = Tensor::full(loss_value.shape().to_vec(), T::one());
        if nodes[loss.id].requires_grad {
            nodes[loss.id].grad = Some(seed);
        }
        for node in nodes.iter_mut().skip(loss.id + 1) {
            node.backward = None;
        }
        for id in (0..=loss.id).rev() {
            let node = &mut nodes[id];
            let backward = node.backward.take();
            let grad = if node.is_leaf { node.grad.clone() } else { node.grad.take() };
            let (Some(backward), Some(grad)) = (backward, grad) else {
                continue;
            };
            let parents = node.parents.clone();
            let parent_grads = backward(&grad);
            debug_assert_eq!(parent_grads.len(), parents.len());
            for (pid, pg) in parents.into_iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                let parent = &mut nodes[pid];
                if !parent.requires_grad {
                    continue;
                }
                debug_assert_eq!(parent.value.shape(), pg.shape());
                match parent.grad.as_mut() {
                    Some(acc) => acc.add_assign(&pg)?,
                    None => parent.grad = Some(pg),
                }
            }
        }
        Ok(())
    }

    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.nodes.borrow()[var.id].grad.clone()
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push(
        &self,
        value: Tensor<T>,
        parents: Vec<usize>,
        requires_grad: bool,
        is_leaf: bool,
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, parents, requires_grad, is_leaf, grad: None, backward });
        Var { tape: self, id }
    }

    /// Appends an op output. The closure is kept only if some input is tracked.
    pub(crate) fn record<'t>(
        &'t self,
        value: Tensor<T>,
        parents: &[Var<'t, T>],
        backward: impl FnOnce(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'t, T> {
        if cfg!(debug_assertions) && value.data().iter().any(|v| v.is_nan()) {
            let finite_inputs = parents.iter().all(|p| p.value().all_finite());
            assert!(!finite_inputs, "forward op produced NaN from finite inputs");
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let ids = parents.iter().map(|p| p.id).collect();
        let backward: Option<BackwardFn<T>> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.push(value, ids, requires_grad, false, backward)
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Gradient accumulated by the last backward pass (leaves only).
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> Option<T> {
        self.value().item()
    }

    pub(crate) fn same_tape(&self, other: &Var<'t, T>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::TapeMismatch { op })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(x.grad().unwrap().item(), Some(6.0));
    }

    #[test]
    fn second_backward_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.backward(y), Err(TensorError::TapeConsumed));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss { .. })));
        assert!(!tape.is_consumed());
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x) + sum(2x) -> grad 3
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([4], 1.5));
        let a = x.sum();
        let b = x.scale(2.0).sum();
        let loss = a.add(b).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[3.0; 4]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([2], 1.0));
        let c = tape.constant(Tensor::full([2], 2.0));
        let loss = x.mul(c).unwrap().sum();
        tape.backward(loss).unwrap();
        assert!(c.grad().is_none());
        assert_eq!(x.grad().unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn mixing_tapes_is_an_error() {
        let t1 = Tape::<f64>::new();
        let t2 = Tape::<f64>::new();
        let a = t1.leaf(Tensor::scalar(1.0));
        let b = t2.leaf(Tensor::scalar(1.0));
        assert!(matches!(a.add(b), Err(TensorError::TapeMismatch { .. })));
    }
}
