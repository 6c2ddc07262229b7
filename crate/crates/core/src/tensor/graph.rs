//! Define-by-run computation graph with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so reverse index order is a
//! valid reverse topological order for the backward sweep.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::conv::{check_bias, conv2d_backward};
use super::ops::{
    dup_channels_backward, max_pool2_backward, max_pool2_with_argmax, mse_backward, relu_backward, scale,
    upsample2_backward,
};
use super::{add, conv2d, dup_channels, mse, relu, upsample2, ConvSpec, Real, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2 {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    Add(Var, Var),
    DupChannels(Var),
    Scale(Var, f64),
    Mse {
        pred: Var,
        target: Var,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Removes and returns the gradient of `var`.
    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input (images, targets). No gradient is computed for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf whose gradient [`Graph::backward`] reports.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let value = {
            let b = bias.map(|b| self.value(b));
            check_bias(&spec, b)?;
            conv2d(self.value(input), &spec, self.value(weight), b)?
        };
        let rg = self.needs(&[Some(input), Some(weight), bias]);
        Ok(self.push(value, Op::Conv2d { input, weight, bias, spec }, rg))
    }

    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let (value, argmax) = max_pool2_with_argmax(self.value(input))?;
        let rg = self.needs(&[Some(input)]);
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, rg))
    }

    pub fn upsample2(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let value = upsample2(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let rg = self.needs(&[Some(input), Some(weight), bias]);
        Ok(self.push(value, Op::Upsample2 { input, weight, bias }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = relu(self.value(input));
        let rg = self.needs(&[Some(input)]);
        self.push(value, Op::Relu(input), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = add(self.value(a), self.value(b))?;
        let rg = self.needs(&[Some(a), Some(b)]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn dup_channels(&mut self, input: Var) -> Result<Var> {
        let value = dup_channels(self.value(input))?;
        let rg = self.needs(&[Some(input)]);
        Ok(self.push(value, Op::DupChannels(input), rg))
    }

    /// Multiplies by a fixed, non-trainable factor.
    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let value = scale(self.value(input), factor)?;
        let rg = self.needs(&[Some(input)]);
        Ok(self.push(value, Op::Scale(input, factor), rg))
    }

    /// Mean squared error as a `[1]`-shaped node.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let loss = mse(self.value(pred), self.value(target))?;
        let rg = self.needs(&[Some(pred), Some(target)]);
        Ok(self.push(Tensor::scalar(T::from_f64(loss)), Op::Mse { pred, target }, rg))
    }

    /// Fingerprint of every non-smooth branch taken by the forward pass:
    /// the sign pattern at each ReLU and the argmax of each pooling window.
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.nodes[x.0].value.data() {
                        (*v > T::ZERO).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a single-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.value(loss).shape();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(loss_shape, T::from_f64(1.0)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            let mut contribs: Vec<(Var, Tensor<T>)> = Vec::with_capacity(3);
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { input, weight, bias, spec } => {
                    let cg = conv2d_backward(self.value(*input), spec, self.value(*weight), &g, rg(*input))?;
                    if let Some(gx) = cg.input {
                        contribs.push((*input, gx));
                    }
                    if rg(*weight) {
                        contribs.push((*weight, cg.weights));
                    }
                    if let (Some(b), Some(gb)) = (bias, cg.bias) {
                        if rg(*b) {
                            contribs.push((*b, gb));
                        }
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    contribs.push((*input, max_pool2_backward(self.value(*input).shape(), argmax, &g)?));
                }
                Op::Upsample2 { input, weight, bias } => {
                    let ug = upsample2_backward(self.value(*input), self.value(*weight), &g, rg(*input))?;
                    if let Some(gx) = ug.input {
                        contribs.push((*input, gx));
                    }
                    if rg(*weight) {
                        contribs.push((*weight, ug.weights));
                    }
                    if let Some(b) = bias {
                        if rg(*b) {
                            contribs.push((*b, ug.bias));
                        }
                    }
                }
                Op::Relu(x) => contribs.push((*x, relu_backward(self.value(*x), &g))),
                Op::Add(a, b) => {
                    contribs.push((*a, g.clone()));
                    contribs.push((*b, g));
                }
                Op::DupChannels(x) => contribs.push((*x, dup_channels_backward(self.value(*x).shape(), &g))),
                Op::Scale(x, k) => contribs.push((*x, scale(&g, *k)?)),
                Op::Mse { pred, target } => {
                    let up = g.data()[0].to_f64();
                    let gp = mse_backward(self.value(*pred), self.value(*target), up)?;
                    if rg(*target) {
                        contribs.push((*target, scale(&gp, -1.0)?));
                    }
                    contribs.push((*pred, gp));
                }
            }
            for (var, contrib) in contribs {
                if !rg(var) {
                    continue;
                }
                grads[var.0] = Some(match grads[var.0].take() {
                    None => contrib,
                    Some(acc) => add(&acc, &contrib)?,
                });
            }
        }

        // Only parameter leaves keep their gradients.
        for (node, grad) in self.nodes.iter().zip(grads.iter_mut()) {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                *grad = None;
            } else if let Some(g) = grad {
                g.ensure_finite("backward")?;
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_weight_hand_derivative() {
        // loss = mse(w·1, 0) = w², dL/dw = 2w = 6 at w = 3
        let mut g = Graph::<f64>::new();
        let one = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let w = g.param(Tensor::full(&[1, 1, 1, 1], 3.0));
        let spec = ConvSpec {
            has_bias: false,
            ..ConvSpec::same(1, 1, 1, 1)
        };
        let y = g.conv2d(one, w, None, spec).unwrap();
        let zero = g.constant(Tensor::zeros(&[1, 1, 1, 1]));
        let loss = g.mse(y, zero).unwrap();
        assert_eq!(g.value(loss).data(), [9.0]);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), [6.0]);
        assert!(grads.get(one).is_none());
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::full(&[2, 2], 1.5));
        let c = g.constant(Tensor::full(&[2, 2], 4.0));
        let loss = g.mse(c, c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(w).is_none_or(|t| t.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn shared_input_accumulates() {
        // loss = mean((x + x)²) over one element → d/dx = 8x
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[1], 0.5));
        let s = g.add(x, x).unwrap();
        let z = g.constant(Tensor::zeros(&[1]));
        let loss = g.mse(s, z).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), [4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
    }
}
