use std::collections::HashMap;

use crate::kernels::{self, Broadcast};
use crate::{Element, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv3d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    FullyConnected {
        input: Var,
        weight: Var,
        bias: Var,
    },
    GlobalAvgPool(Var),
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Sigmoid(Var),
    Relu(Var),
    Scale(Var, T),
    ConcatChannels(Var, Var),
    Flatten(Var),
    Sum(Var),
    L1Loss(Var, Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss w.r.t. every reachable tracked leaf.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    by_leaf: HashMap<Var, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.by_leaf.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.by_leaf.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

/// Single-owner record of executed operations, in execution order.
///
/// Every operation appends one node whose inputs were appended earlier, so
/// the record is always topologically sorted. A node tracks gradients iff
/// at least one input does; untracked subgraphs are skipped by
/// [`Tape::backward`].
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that is treated as data.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.0 >= self.nodes.len() {
            return Err(TensorError::Usage(format!(
                "variable {} is not on this tape",
                var.0
            )));
        }
        Ok(())
    }

    fn any_grad(&self, vars: &[Var]) -> Result<bool> {
        let mut any = false;
        for &v in vars {
            self.check(v)?;
            any |= self.nodes[v.0].requires_grad;
        }
        Ok(any)
    }

    pub fn conv3d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let rg = self.any_grad(&[input, kernel, bias])?;
        let out = kernels::conv3d(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            stride,
            pad,
        )?;
        let op = Op::Conv3d {
            input,
            kernel,
            bias,
            stride,
            pad,
        };
        Ok(self.push(out, op, rg))
    }

    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let rg = self.any_grad(&[input, weight, bias])?;
        let out =
            kernels::fully_connected(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(
            out,
            Op::FullyConnected {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let rg = self.any_grad(&[x])?;
        let out = kernels::global_avg_pool(self.value(x))?;
        Ok(self.push(out, Op::GlobalAvgPool(x), rg))
    }

    /// `a + b`, where `b` may broadcast per channel or per voxel.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let rg = self.any_grad(&[a, b])?;
        let (out, kind) = kernels::binary(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b, kind), rg))
    }

    /// `a * b`, where `b` may broadcast per channel or per voxel.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let rg = self.any_grad(&[a, b])?;
        let (out, kind) = kernels::binary(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b, kind), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let rg = self.any_grad(&[x])?;
        let out = self.value(x).map(kernels::sigmoid);
        Ok(self.push(out, Op::Sigmoid(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let rg = self.any_grad(&[x])?;
        let out = self.value(x).map(|v| v.max(T::zero()));
        Ok(self.push(out, Op::Relu(x), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let rg = self.any_grad(&[x])?;
        let out = self.value(x).map(|v| v * factor);
        Ok(self.push(out, Op::Scale(x, factor), rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let rg = self.any_grad(&[a, b])?;
        let out = Tensor::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::ConcatChannels(a, b), rg))
    }

    /// Collapses every axis after the first: `[B, ...] -> [B, N]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let rg = self.any_grad(&[x])?;
        let v = self.value(x);
        let b = v.shape()[0];
        let n = v.numel() / b;
        let out = v.clone().reshape(vec![b, n])?;
        Ok(self.push(out, Op::Flatten(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let rg = self.any_grad(&[x])?;
        let total = self
            .value(x)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), rg))
    }

    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let rg = self.any_grad(&[pred, target])?;
        let out = kernels::l1_loss(self.value(pred), self.value(target))?;
        Ok(self.push(out, Op::L1Loss(pred, target), rg))
    }

    /// Back-propagates from a scalar `loss` and clears the tape.
    ///
    /// Returns the gradient of every tracked leaf reachable from `loss`.
    /// Fails if `loss` is not a single value or does not depend on any
    /// tracked leaf.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(TensorError::Usage(
                "backward called on a value that does not track gradients".into(),
            ));
        }

        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::from_parts(
            root.value.shape().to_vec(),
            vec![T::one()],
        ));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                out.by_leaf.insert(Var(i), g);
                continue;
            }
            for (var, contrib) in self.input_grads(node, g)? {
                if self.nodes[var.0].requires_grad {
                    accumulate(&mut grads[var.0], contrib);
                }
            }
        }
        self.nodes.clear();
        Ok(out)
    }

    fn input_grads(&self, node: &Node<T>, g: Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            &Op::Conv3d {
                input,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let (gi, gk, gb) = kernels::conv3d_backward(
                    val(input),
                    val(kernel),
                    &g,
                    stride,
                    pad,
                    wants(input),
                )?;
                let mut v = vec![(kernel, gk), (bias, gb)];
                if let Some(gi) = gi {
                    v.push((input, gi));
                }
                v
            }
            &Op::FullyConnected {
                input,
                weight,
                bias,
            } => {
                let (gi, gw, gb) = kernels::fully_connected_backward(val(input), val(weight), &g)?;
                vec![(input, gi), (weight, gw), (bias, gb)]
            }
            &Op::GlobalAvgPool(x) => {
                vec![(x, kernels::global_avg_pool_backward(val(x).shape(), &g))]
            }
            &Op::Add(a, b, kind) => {
                let gb = kernels::reduce_to_rhs(g.data(), val(a).shape(), val(b).shape(), kind);
                vec![(a, g), (b, gb)]
            }
            &Op::Mul(a, b, kind) => {
                let (av, bv) = (val(a), val(b));
                let mut out = Vec::with_capacity(2);
                if wants(b) {
                    let prod: Vec<T> = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&gg, &x)| gg * x)
                        .collect();
                    out.push((b, kernels::reduce_to_rhs(&prod, av.shape(), bv.shape(), kind)));
                }
                if wants(a) {
                    let expanded = kernels::expand_rhs(bv, av.shape(), kind);
                    let data = g
                        .data()
                        .iter()
                        .zip(&expanded)
                        .map(|(&gg, &y)| gg * y)
                        .collect();
                    out.push((a, Tensor::from_parts(av.shape().to_vec(), data)));
                }
                out
            }
            &Op::Sigmoid(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gg, &y)| gg * y * (T::one() - y))
                    .collect();
                vec![(x, Tensor::from_parts(g.shape().to_vec(), data))]
            }
            &Op::Relu(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(val(x).data())
                    .map(|(&gg, &xi)| if xi > T::zero() { gg } else { T::zero() })
                    .collect();
                vec![(x, Tensor::from_parts(g.shape().to_vec(), data))]
            }
            &Op::Scale(x, factor) => vec![(x, g.map(|v| v * factor))],
            &Op::ConcatChannels(a, b) => {
                let ca = val(a).shape()[1];
                let cb = val(b).shape()[1];
                vec![(a, g.slice_channels(0, ca)?), (b, g.slice_channels(ca, cb)?)]
            }
            &Op::Flatten(x) => vec![(x, g.reshape(val(x).shape().to_vec())?)],
            &Op::Sum(x) => {
                let s = g.data()[0];
                vec![(x, Tensor::from_parts(val(x).shape().to_vec(), vec![s; val(x).numel()]))]
            }
            &Op::L1Loss(p, t) => {
                let gp = kernels::l1_loss_grad(val(p), val(t), g.data()[0]);
                let gt = gp.map(|v| -v);
                vec![(p, gp), (t, gt)]
            }
        })
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        None => *slot = Some(g),
    }
}
