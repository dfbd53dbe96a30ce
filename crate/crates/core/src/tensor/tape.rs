use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
///
/// `needs[i]` says whether input `i` wants a gradient; entries for inputs that
/// do not may be returned as `None`.
pub trait BackwardFn<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn BackwardFn<T>>>,
    requires_grad: bool,
}

/// Linear record of executed operations.
///
/// Nodes are appended in execution order, so a node's inputs always have
/// smaller indices and reverse index order is a valid backward schedule.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    kinks: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), kinks: 0xcbf2_9ce4_8422_2325 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.kinks = Self::new().kinks;
    }

    /// Record a leaf; gradients are tracked if `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad;
        self.nodes.push(Node { value: t, inputs: Vec::new(), op: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Append the result of an operation. Non-finite outputs are rejected.
    pub fn push(&mut self, value: Tensor<T>, inputs: Vec<Var>, op: Box<dyn BackwardFn<T>>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name().to_string() });
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { Some(op) } else { None };
        self.nodes.push(Node { value, inputs, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Fold the sign pattern of inputs to a non-differentiable point (the
    /// leaky-ReLU kink) into a running signature. Finite-difference checks
    /// compare signatures to skip perturbations that cross a kink.
    pub fn note_kinks(&mut self, above: impl IntoIterator<Item = bool>) {
        let mut h = self.kinks;
        for b in above {
            h ^= b as u64 + 1;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.kinks = h;
    }

    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must have one element, shape is {:?}", root.value.shape()),
            ));
        }
        if !root.requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));
        let mut visited = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = op.backward(&inputs, &node.value, &g, &needs)?;
            for ((v, need), ig) in node.inputs.iter().zip(&needs).zip(input_grads) {
                let (true, Some(ig)) = (*need, ig) else { continue };
                if ig.shape() != self.nodes[v.0].value.shape() {
                    return Err(Error::shape(
                        op.name(),
                        format!(
                            "gradient shape {:?} does not match input {:?}",
                            ig.shape(),
                            self.nodes[v.0].value.shape()
                        ),
                    ));
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        grads.resize_with(self.nodes.len(), || None);
        Ok(Gradients { grads, visited })
    }
}

/// Result of [`Tape::backward`]. Only leaves keep their gradients;
/// intermediate gradients are dropped once propagated.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    visited: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Node indices in the order their backward functions ran.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}
