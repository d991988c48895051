use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward rule may look at.
pub struct BackwardCtx<'a, T: Scalar> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor<T>,
    /// Forward values of the node's inputs, in recording order.
    pub inputs: Vec<&'a Tensor<T>>,
    /// Forward value of the node itself.
    pub output: &'a Tensor<T>,
}

/// Maps the upstream gradient to one gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Result<Vec<Tensor<T>>>>;

struct Node<T: Scalar> {
    op: &'static str,
    value: Tensor<T>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    finite: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so inputs always precede the
/// operations that consume them and a reverse sweep is a valid topological
/// traversal.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    /// First operation that produced a non-finite value from finite inputs.
    blowup: Option<(&'static str, Var)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), blowup: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let finite = value.all_finite();
        self.nodes.push(Node {
            op: "leaf",
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            finite,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// The first operation that turned finite inputs into a non-finite
    /// value, if any.
    pub fn non_finite_origin(&self) -> Option<(&'static str, Var)> {
        self.blowup
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        backward: BackwardFn<T>,
    ) -> Var {
        let finite = value.all_finite();
        if !finite && self.blowup.is_none() && inputs.iter().all(|v| self.nodes[v.0].finite) {
            self.blowup = Some((op, Var(self.nodes.len())));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            finite,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an operation with a caller-supplied forward and backward.
    ///
    /// `backward` is invoked verbatim during the reverse sweep; it must return
    /// one gradient per input with that input's shape, otherwise the sweep
    /// fails with [`Error::Gradient`].
    pub fn custom(
        &mut self,
        inputs: &[Var],
        forward: impl FnOnce(&[&Tensor<T>]) -> Result<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = forward(&values)?;
        Ok(self.push("custom", out, inputs, backward))
    }

    /// Reverse sweep from a single-element `loss`.
    ///
    /// Returns gradients for every leaf created with `requires_grad`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Gradient(format!(
                "backward needs a single-element loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: node.inputs.iter().map(|&i| &self.nodes[i].value).collect(),
                output: &node.value,
            };
            let input_grads = backward(&ctx)?;
            if input_grads.len() != node.inputs.len() {
                return Err(Error::Gradient(format!(
                    "{} returned {} gradients for {} inputs",
                    node.op,
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            for (k, (&input, g)) in node.inputs.iter().zip(input_grads).enumerate() {
                let target = &self.nodes[input];
                if g.shape() != target.value.shape() {
                    return Err(Error::Gradient(format!(
                        "{} returned gradient of shape {:?} for input {k} of shape {:?}",
                        node.op,
                        g.shape(),
                        target.value.shape()
                    )));
                }
                if !target.requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if n.inputs.is_empty() && n.requires_grad {
                    grads[i].take()
                } else {
                    None
                }
            })
            .collect();
        Ok(Grads { grads: leaves })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Grads<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient for a leaf; `None` if the leaf did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf, zero-filled when the loss did not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn custom_identity_is_pass_through() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(&[3], vec![1.0, -2.0, 3.5]).unwrap());
        let y = tape
            .custom(
                &[x],
                |v| Ok(v[0].clone()),
                Box::new(|ctx| Ok(vec![ctx.grad.clone()])),
            )
            .unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn custom_round_with_straight_through() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(&[4], vec![0.2, 1.7, -0.6, 2.5]).unwrap());
        let y = tape
            .custom(
                &[x],
                |v| Ok(v[0].map(|a| a.round())),
                Box::new(|ctx| Ok(vec![ctx.grad.clone()])),
            )
            .unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0, -1.0, 3.0]);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn custom_wrong_shape_gradient_rejected_at_reverse_time() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::zeros(&[3]));
        let y = tape
            .custom(
                &[x],
                |v| Ok(v[0].clone()),
                Box::new(|_| Ok(vec![Tensor::zeros(&[2])])),
            )
            .unwrap();
        let loss = tape.sum(y);
        assert!(matches!(tape.backward(loss), Err(Error::Gradient(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let x = tape.param(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let y = tape.add(c, x).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn records_where_values_stop_being_finite() {
        let mut tape = Tape::<f64>::new();
        let bad = tape.constant(Tensor::new(&[2], vec![f64::NAN, 1.0]).unwrap());
        let x = tape.param(Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
        // a non-finite input is not the op's fault
        tape.add(bad, x).unwrap();
        assert_eq!(tape.non_finite_origin(), None);
        let inv = tape
            .custom(&[x], |v| Ok(v[0].map(|a| 1.0 / a)), Box::new(|ctx| Ok(vec![ctx.grad.clone()])))
            .unwrap();
        let y = tape.scale(inv, 2.0);
        assert_eq!(tape.non_finite_origin(), Some(("custom", inv)));
        assert!(!tape.value(y).all_finite());
    }
}
