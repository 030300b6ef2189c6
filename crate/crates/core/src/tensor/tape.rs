//! Reverse-mode tape.
//!
//! Operations append nodes to a [`Tape`]; each node stores its value and,
//! when gradients are enabled, a backward closure producing gradient
//! contributions for its parents. [`Tape::backward`] walks the nodes in
//! reverse creation order, which is a valid topological order.

use std::cell::RefCell;
use std::sync::Arc;

use super::TensorData;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Copy, Clone, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct BackOp {
    /// Given the upstream gradient, produce `(parent, contribution)` pairs.
    pub run: Box<dyn Fn(&TensorData) -> Vec<(usize, TensorData)>>,
}

struct Node {
    value: Arc<TensorData>,
    requires: bool,
    back: Option<BackOp>,
}

/// A single forward pass's computation graph.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Tape {
    /// Tape that records backward closures.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// Tape that only computes values (inference / evaluation).
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Constant input; gradients never flow into it.
    pub fn leaf(&self, value: TensorData) -> Var {
        self.push(Arc::new(value), false, None)
    }

    /// Trainable input; `backward` reports a gradient for it.
    pub fn param(&self, value: TensorData) -> Var {
        let requires = self.grad_enabled;
        self.push(Arc::new(value), requires, None)
    }

    pub(crate) fn push(&self, value: Arc<TensorData>, requires: bool, back: Option<BackOp>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires: requires && self.grad_enabled,
            back: if self.grad_enabled { back } else { None },
        });
        Var(nodes.len() - 1)
    }

    /// Shared handle to a node's value.
    pub fn value(&self, v: Var) -> Arc<TensorData> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Accumulate gradients of a scalar `root` with respect to every node
    /// that requires them.
    ///
    /// Panics if gradients are disabled or `root` is not a single-element
    /// tensor.
    pub fn backward(&self, root: Var) -> Gradients {
        assert!(self.grad_enabled, "backward on a no-grad tape");
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.len(),
            1,
            "backward root must be scalar, got shape {:?}",
            nodes[root.0].value.shape()
        );
        let mut grads: Vec<Option<TensorData>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(TensorData::ones(nodes[root.0].value.raw_dim()));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].as_ref() else {
                continue;
            };
            if let Some(back) = nodes[id].back.as_ref() {
                let contributions = (back.run)(g);
                for (parent, contrib) in contributions {
                    debug_assert!(parent < id, "backward edge must point to an earlier node");
                    if !nodes[parent].requires {
                        continue;
                    }
                    match grads[parent].as_mut() {
                        Some(acc) => *acc += &contrib,
                        None => grads[parent] = Some(contrib),
                    }
                }
                // Interior gradients are not needed once propagated unless the
                // node itself was marked as a parameter leaf.
            }
        }
        Gradients { grads }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<TensorData>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&TensorData> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, or zeros of the given shape when no path reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> TensorData {
        match self.get(v) {
            Some(g) => g.clone(),
            None => TensorData::zeros(ndarray::IxDyn(shape)),
        }
    }
}
