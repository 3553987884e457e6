use super::loss::CrossEntropyCache;
use super::ops::{ConvGeom, UpsampleTable};
use super::{check_dims, Elem, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<E: Elem> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<E>,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, E),
    Upsample {
        input: Var,
        rows: UpsampleTable,
        cols: UpsampleTable,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    ChannelScale {
        input: Var,
        scale: Vec<E>,
    },
    CrossEntropy {
        logits: Var,
        cache: CrossEntropyCache,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

pub(crate) struct Node<E: Elem> {
    pub(crate) dims: Vec<usize>,
    pub(crate) value: Vec<E>,
    pub(crate) needs_grad: bool,
    pub(crate) op: Op<E>,
}

/// A tape of operations. Nodes are appended in evaluation order, so inputs
/// always precede their consumers and reverse iteration is a valid
/// topological order for backpropagation.
pub struct Graph<E: Elem = f32> {
    pub(crate) nodes: Vec<Node<E>>,
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, dims: Vec<usize>, value: Vec<E>, needs_grad: bool, op: Op<E>) -> Var {
        debug_assert_eq!(dims.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            dims,
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register a tensor as a leaf. Gradients are tracked iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, tensor: &Tensor<E>) -> Var {
        self.push(
            tensor.dims().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad(),
            Op::Leaf,
        )
    }

    /// A constant (never differentiated) leaf.
    pub fn constant(&mut self, dims: &[usize], data: Vec<E>) -> Result<Var> {
        let n = check_dims(dims)?;
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "constant dims {dims:?} hold {n} values, got {}",
                data.len()
            )));
        }
        Ok(self.push(dims.to_vec(), data, false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[E] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn scalar(&self, v: Var) -> Result<E> {
        let node = &self.nodes[v.0];
        if node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar, node has dims {:?}",
                node.dims
            )));
        }
        Ok(node.value[0])
    }

    pub fn to_tensor(&self, v: Var) -> Result<Tensor<E>> {
        let node = &self.nodes[v.0];
        Tensor::new(&node.dims, node.value.clone())
    }

    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.nodes[v.0].value.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Reverse-mode sweep from a scalar node. Every leaf that tracks
    /// gradients and is reachable from `loss` receives its gradient; other
    /// leaves get none.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got dims {:?}",
                root.dims
            )));
        }
        if !root.value[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<E>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if root.needs_grad {
            grads[loss.0] = Some(vec![E::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        // Only leaves keep gradients.
        for (i, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<E: Elem = f32> {
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Elem> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&[E]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<E>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Gradient buffer for `v`, zero-initialised on first touch.
pub(crate) fn grad_slot<'g, E: Elem>(
    grads: &'g mut [Option<Vec<E>>],
    nodes: &[Node<E>],
    v: Var,
) -> Option<&'g mut Vec<E>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![E::zero(); len]))
}
