use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use super::{Real, Tensor};
use crate::error::{contract_err, Result};

/// Backward rule of one recorded operation.
///
/// Receives the gradient of the loss with respect to the operation output
/// and a mask telling which parents need a gradient; returns one entry per
/// parent, in the order the parents were recorded.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// A tape belongs to one forward/backward pass. Nodes are appended in
/// execution order and [`Tape::backward`] walks them in exact reverse.
/// Tapes built with [`Tape::inference`] record values only.
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Var<'_, T> {}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        let v = self.value();
        self.tape.push(v, Vec::new(), None, false)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            grad_enabled: true,
        }
    }

    /// A tape that never records backward rules.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        value: Rc<Tensor<T>>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A non-differentiable input.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(t), Vec::new(), None, false)
    }

    /// A differentiable leaf (a learnable parameter or a probed input).
    pub fn param(&self, t: Tensor<T>) -> Var<'_, T> {
        self.leaf(t, true)
    }

    pub fn leaf(&self, t: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(Rc::new(t), Vec::new(), None, requires_grad && self.grad_enabled)
    }

    /// Appends an operation output with its backward rule.
    ///
    /// The rule is dropped when no parent requires a gradient.
    pub fn record<F>(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: F) -> Var<'_, T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let needs = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        if needs {
            self.push(Rc::new(value), ids, Some(Box::new(backward)), true)
        } else {
            self.push(Rc::new(value), Vec::new(), None, false)
        }
    }

    pub fn value(&self, v: Var<'_, T>) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| n[v.id].value.as_ref())
    }

    /// Reverse pass from a scalar loss.
    ///
    /// Fails if the loss has more than one element or if this tape has
    /// already been differentiated.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.get() {
            return contract_err("backward called twice on the same tape");
        }
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.len() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            ));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let Some(backward) = nodes[id].backward.take() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parents = std::mem::take(&mut nodes[id].parents);
            let mask: Vec<bool> = parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let pg = backward(&g, &mask);
            debug_assert_eq!(pg.len(), parents.len());
            for ((&p, g), need) in parents.iter().zip(pg).zip(mask) {
                let (Some(g), true) = (g, need) else {
                    continue;
                };
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "grad shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a loss with respect to every differentiable leaf.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}
