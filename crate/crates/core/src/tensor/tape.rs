//! Reverse-mode automatic differentiation over [`Array`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes whose inputs
//! do not depend on anything differentiable are stored without a backward
//! closure, so inference passes cost little more than plain evaluation.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::array::Array;
use super::params::{ParamId, ParamStore};

/// Inputs handed to a backward closure.
pub struct BackwardCtx<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Array,
    /// Values of the node's parents, in the order they were registered.
    pub inputs: &'a [Rc<Array>],
    /// This node's own forward value.
    pub output: &'a Array,
}

type BackwardFn = Box<dyn Fn(&BackwardCtx) -> Vec<Option<Array>>>;

struct Node {
    value: Rc<Array>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

/// Operation recorder for one forward/backward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    param_leaves: RefCell<HashMap<ParamId, usize>>,
    grad_enabled: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_leaves: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// A tape that never records backward closures.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.leaf(Rc::new(value), false)
    }

    /// A leaf whose gradient is tracked (used to differentiate w.r.t. inputs).
    pub fn input(&self, value: Array) -> Var<'_> {
        self.leaf(Rc::new(value), self.grad_enabled)
    }

    /// The leaf for a stored parameter. Repeated calls return the same node,
    /// keyed by id only: a tape must not be shared between different stores.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.param_leaves.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let var = self.leaf(store.value_rc(id), self.grad_enabled && store.trainable(id));
        self.param_leaves.borrow_mut().insert(id, var.id);
        var
    }

    fn leaf(&self, value: Rc<Array>, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an operation. `backward` returns one optional gradient per parent.
    pub fn push<F>(&self, value: Array, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&BackwardCtx) -> Vec<Option<Array>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = self.grad_enabled && parents.iter().any(|p| nodes[p.id].needs_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: needs_grad.then(|| Box::new(backward) as BackwardFn),
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Array> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Array>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Array::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let inputs: Vec<Rc<Array>> = node.parents.iter().map(|&p| nodes[p].value.clone()).collect();
            let parent_grads = backward(&BackwardCtx {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
            });
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].needs_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "gradient shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let params = self
            .param_leaves
            .borrow()
            .iter()
            .filter_map(|(&pid, &node)| grads[node].take().map(|g| (pid, g)))
            .collect();
        Gradients { params, leaves: grads }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    params: HashMap<ParamId, Array>,
    leaves: Vec<Option<Array>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Array> {
        self.params.get(&id)
    }

    /// Gradient w.r.t. an input leaf created with [`Tape::input`].
    pub fn wrt(&self, var: Var<'_>) -> Option<&Array> {
        self.leaves.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Array)> {
        self.params.iter().map(|(&k, v)| (k, v))
    }

    pub fn into_params(self) -> HashMap<ParamId, Array> {
        self.params
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Array> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.tape.nodes.borrow()[self.id].value.dim(axis)
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    /// Same value, cut off from the gradient graph.
    pub fn detach(&self) -> Var<'t> {
        let v = self.value();
        self.tape.leaf(v, false)
    }
}
