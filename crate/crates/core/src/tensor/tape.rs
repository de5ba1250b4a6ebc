use std::cell::{Cell, RefCell};
use std::fmt;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Inputs handed to a node's backward rule.
pub(crate) struct BackwardCtx<'a, T> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a [T],
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    /// `needs[i]` is true when input `i` leads to a trainable leaf.
    pub needs: Vec<bool>,
}

/// Returns one gradient buffer per input (`None` where not needed).
pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
    /// Accumulated gradient, populated only for trainable leaves.
    grad: Option<Vec<T>>,
}

/// Recording of primitive applications for reverse-mode differentiation.
///
/// A tape lives on one thread; nodes are appended in creation order, which
/// is a valid topological order, so backward simply walks it in reverse.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    single_use: bool,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("single_use", &self.single_use)
            .finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            single_use: false,
            consumed: Cell::new(false),
        }
    }

    /// A tape that refuses a second call to [`Tape::backward`].
    pub fn single_use() -> Self {
        Self {
            single_use: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Trainable leaf; its gradient is available after [`Tape::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a primitive's output. Non-finite outputs are rejected.
    pub(crate) fn push(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = ids.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value,
            parents: ids,
            requires_grad,
            backward: requires_grad.then_some(backward),
            grad: None,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    pub fn value(&self, v: Var<'_, T>) -> Tensor<T> {
        self.nodes.borrow()[v.id].value.clone()
    }

    /// Accumulated gradient of a trainable leaf, if backward has reached it.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Propagates d(loss)/d(node) to every trainable leaf reachable from
    /// `loss`, adding into any gradient already accumulated there.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        if self.single_use && self.consumed.get() {
            return Err(Error::Backward("tape already consumed".into()));
        }
        let leaf_grads = {
            let nodes = self.nodes.borrow();
            let root = &nodes[loss.id];
            if root.value.numel() != 1 {
                return Err(Error::Backward(format!(
                    "loss must be scalar, got shape {:?}",
                    root.value.shape()
                )));
            }
            let mut grads: Vec<Option<Vec<T>>> = Vec::new();
            grads.resize_with(loss.id + 1, || None);
            grads[loss.id] = Some(vec![T::one()]);

            for id in (0..=loss.id).rev() {
                let node = &nodes[id];
                let Some(backward) = node.backward.as_ref() else {
                    continue;
                };
                let Some(grad) = grads[id].take() else {
                    continue;
                };
                let ctx = BackwardCtx {
                    grad: &grad,
                    inputs: node.parents.iter().map(|&p| &nodes[p].value).collect(),
                    output: &node.value,
                    needs: node
                        .parents
                        .iter()
                        .map(|&p| nodes[p].requires_grad)
                        .collect(),
                };
                let input_grads = backward(&ctx);
                debug_assert_eq!(input_grads.len(), node.parents.len());
                for (&p, g) in node.parents.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    if !nodes[p].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(g.len(), nodes[p].value.numel());
                    match &mut grads[p] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads
        };

        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads.into_iter().enumerate() {
            let node = &mut nodes[id];
            let Some(g) = g else { continue };
            if !node.requires_grad || node.backward.is_some() || !node.parents.is_empty() {
                continue;
            }
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                slot @ None => *slot = Some(g),
            }
        }
        self.consumed.set(true);
        Ok(())
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    pub(crate) fn same_tape(&self, other: &Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "operands live on different tapes".into(),
            ))
        }
    }
}
