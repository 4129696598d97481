//! Reverse-mode differentiation over grid-valued nodes.
//!
//! A [`Tape`] is an append-only list of nodes. Every node holds its forward
//! value; operation nodes additionally hold the [`Op`] that produced them, which
//! knows how to map an output gradient to input gradients. Inputs always refer
//! to earlier nodes, so the node order is a topological order and
//! [`Tape::backward`] is a single descending sweep.

pub mod ops;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Real;

/// Index of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation recorded on a tape.
pub trait Op<T: Real>: Send {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, given the output gradient.
    /// Entries whose `needs` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Grid<T>],
        output: &Grid<T>,
        grad_out: &Grid<T>,
        needs: &[bool],
    ) -> Vec<Option<Grid<T>>>;

    /// Distance of the recorded inputs to the nearest non-differentiable point
    /// (ReLU zero, max-pool tie). `None` for smooth operations.
    fn kink_margin(&self, _inputs: &[&Grid<T>]) -> Option<T> {
        None
    }
}

struct Node<T: Real> {
    op: Option<Box<dyn Op<T>>>,
    inputs: Vec<NodeId>,
    value: Grid<T>,
    requires_grad: bool,
}

/// Append-only computation record.
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients are produced for it.
    pub fn param(&mut self, value: Grid<T>) -> NodeId {
        self.leaf(value, true)
    }

    /// Non-trainable leaf (inputs, targets, fixed kernels).
    pub fn constant(&mut self, value: Grid<T>) -> NodeId {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Grid<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Record an operation whose forward value has already been computed.
    pub fn record(&mut self, op: Box<dyn Op<T>>, inputs: Vec<NodeId>, value: Grid<T>) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op: Some(op),
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Grid<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Name of the operation that produced `id`, or `"leaf"`.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.as_ref().map_or("leaf", |op| op.name())
    }

    /// Smallest kink margin over all recorded non-smooth operations.
    pub fn kink_margin(&self) -> Option<T> {
        self.nodes
            .iter()
            .filter_map(|n| {
                let op = n.op.as_ref()?;
                let inputs: Vec<&Grid<T>> = n.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                op.kink_margin(&inputs)
            })
            .reduce(T::min)
    }

    /// Back-propagate from a scalar node. Gradients of every node that depends
    /// on a trainable leaf and is reachable from `loss` are populated.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0].value;
        if !root.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1x1, got {:?}", root.shape()),
            ));
        }
        let mut grads: Vec<Option<Grid<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Grid::scalar(T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(op) = node.op.as_ref() else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(grad_out) = grads[id].take() else { continue };
            let inputs: Vec<&Grid<T>> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect();
            let input_grads = op.backward(&inputs, &node.value, &grad_out, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((input, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                debug_assert!(g.same_shape(&self.nodes[input.0].value), "{} gradient shape", op.name());
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[id] = Some(grad_out);
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Tape::backward`]: one optional gradient per node.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Grid<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Grid<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Grid<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}
