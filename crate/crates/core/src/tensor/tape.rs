use super::ops::Op;
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<F> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<F>,
    pub(crate) op: Op<F>,
    pub(crate) needs_grad: bool,
}

/// A linear record of one forward computation.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and the backward pass is a single reverse sweep. A tape
/// lives for one training step; build a new one for the next step.
pub struct Tape<F> {
    pub(crate) nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op<F>) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let needs_grad = match &op {
            Op::Leaf => false,
            op => op.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that receives a gradient.
    pub fn param(&mut self, t: &Tensor<F>) -> Var {
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf);
        self.nodes[v.0].needs_grad = true;
        v
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn constant_from(&mut self, shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::shape("constant", &shape, &[data.len()]));
        }
        Ok(self.push(shape, data, Op::Leaf))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].data
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("recorded shape")
    }

    pub fn scalar_value(&self, v: Var) -> F {
        self.nodes[v.0].data[0]
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        let node = &self.nodes[loss.0];
        if node.data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !node.needs_grad {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let n = &self.nodes[idx];
            if !n.needs_grad || matches!(n.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            n.op.backward(self, idx, &g, &mut grads);
        }
        Ok(Grads { grads })
    }

    /// Adds `f` into the gradient slot of `v` if it takes part in differentiation.
    pub(crate) fn acc(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        let n = &self.nodes[v.0];
        if !n.needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); n.data.len()]);
        f(slot);
    }
}

/// Gradients of leaves produced by [`Tape::backward`].
///
/// Interior gradients are released during the sweep; only leaf slots remain.
pub struct Grads<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Grads<F> {
    /// Gradient of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, with zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, tape: &Tape<F>, v: Var) -> Vec<F> {
        self.get(v)
            .map(<[F]>::to_vec)
            .unwrap_or_else(|| vec![F::zero(); tape.value(v).len()])
    }
}
