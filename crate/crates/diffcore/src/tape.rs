//! Dynamic reverse-mode tape.
//!
//! Every primitive appends one node holding its output value, the ids of its
//! inputs and a backward rule. Nodes are appended after their inputs, so the
//! node order is already a topological order and `backward` simply walks it
//! in reverse.

use std::fmt::Debug;

use crate::error::{DiffError, Result};
use crate::scalar::Scalar;
use crate::tensor::DTensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded primitive.
///
/// `inputs` are the values of the node's inputs in recording order, `output`
/// is the node's own value and `grad` is dL/d(output). One entry is returned
/// per input; `None` means the input receives no contribution.
pub trait Backward<T: Scalar>: Debug {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&DTensor<T>],
        output: &DTensor<T>,
        grad: &[T],
    ) -> Vec<Option<Vec<T>>>;
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: DTensor<T>,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward<T>>>,
}

/// Ordered record of primitive applications for one forward pass.
#[derive(Debug)]
pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scalars held by recorded values, a proxy for activation memory.
    pub fn stored_elements(&self) -> usize {
        self.nodes.iter().map(|n| n.value.numel()).sum()
    }

    /// Drops every recorded node and intermediate.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Records a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, tensor: DTensor<T>) -> Var {
        let mut tensor = tensor;
        tensor.zero_grad();
        self.nodes.push(Node {
            value: tensor,
            inputs: Vec::new(),
            rule: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that receives gradients.
    pub fn param(&mut self, tensor: DTensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: DTensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &DTensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Resets the gradient accumulators of every leaf.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    /// Appends a node computed outside the tape together with its backward
    /// rule. The node requires grad iff any input does.
    pub fn custom(&mut self, inputs: &[Var], output: DTensor<T>, rule: Box<dyn Backward<T>>) -> Var {
        self.push(output, inputs.to_vec(), rule)
    }

    pub(crate) fn push(&mut self, output: DTensor<T>, inputs: Vec<Var>, rule: Box<dyn Backward<T>>) -> Var {
        let needs_grad = inputs.iter().any(|v| self.requires_grad(*v));
        let mut value = output;
        value.set_requires_grad(needs_grad);
        self.nodes.push(Node {
            value,
            inputs,
            rule: needs_grad.then_some(rule),
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates dL/dL = 1 from `loss` to every leaf that requires grad.
    ///
    /// Leaf gradients accumulate across calls until [`Tape::zero_grads`].
    /// Leaves that require grad but are unreachable from `loss` receive a
    /// zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(DiffError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            let Some(rule) = &node.rule else {
                if node.value.requires_grad() {
                    grads[id] = Some(g);
                }
                continue;
            };
            let inputs: Vec<&DTensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = rule.backward(&inputs, &node.value, &g);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", rule.name());
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[input.0].value.requires_grad() {
                    continue;
                }
                debug_assert_eq!(ig.len(), self.nodes[input.0].value.numel(), "{}", rule.name());
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }

        for (id, node) in self.nodes.iter_mut().enumerate() {
            if node.rule.is_some() || !node.inputs.is_empty() || !node.value.requires_grad() {
                continue;
            }
            match grads.get_mut(id).and_then(Option::take) {
                Some(g) => node.value.accumulate_grad(&g),
                None => {
                    let zeros = vec![T::zero(); node.value.numel()];
                    node.value.accumulate_grad(&zeros);
                }
            }
        }
        Ok(())
    }
}
