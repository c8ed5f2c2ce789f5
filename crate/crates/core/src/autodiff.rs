//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order; `backward` walks it once in reverse.

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, BnSaved, Conv2dSpec};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// Value is a quantized view; the gradient goes unchanged to the shadow.
    StraightThrough(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    ChannelMul(Var, Var),
    ChannelAdd(Var, Var),
    Conv2d { input: Var, weight: Var, spec: Conv2dSpec },
    ConvTranspose2d { input: Var, weight: Var, stride: usize },
    BatchNorm { input: Var, gamma: Var, beta: Var, saved: BnSaved },
    Relu(Var),
    Reshape(Var),
    Crop(Var),
    Sum(Var),
    SumSquares(Var),
    SumAbs(Var),
    SoftmaxCrossEntropy { logits: Var, targets: Tensor, softmax: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::StraightThrough(_) => "straight_through",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ChannelMul(..) => "channel_mul",
            Op::ChannelAdd(..) => "channel_add",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu(_) => "relu",
            Op::Reshape(_) => "reshape",
            Op::Crop(_) => "crop",
            Op::Sum(_) => "sum",
            Op::SumSquares(_) => "sum_squares",
            Op::SumAbs(_) => "sum_abs",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(usize, Var)>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients keyed by parameter id; repeated registrations are summed.
    pub fn by_param(&self) -> Result<BTreeMap<usize, Tensor>> {
        let mut out: BTreeMap<usize, Tensor> = BTreeMap::new();
        for &(id, v) in &self.params {
            if let Some(g) = self.get(v) {
                match out.get_mut(&id) {
                    Some(acc) => acc.add_assign(g)?,
                    None => {
                        out.insert(id, g.clone());
                    }
                }
            }
        }
        Ok(out)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf without parameter bookkeeping.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Differentiable leaf whose gradient is reported under `id`.
    pub fn param(&mut self, id: usize, value: Tensor) -> Var {
        let v = self.variable(value);
        self.params.push((id, v));
        v
    }

    /// Node with value `quantized` whose backward is the identity into `shadow`.
    pub fn straight_through(&mut self, shadow: Var, quantized: Tensor) -> Result<Var> {
        self.value(shadow).expect_same_shape(&quantized)?;
        let rg = self.rg(shadow);
        Ok(self.push(quantized, Op::StraightThrough(shadow), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn channel_mul(&mut self, x: Var, scale: Var) -> Result<Var> {
        let v = ops::channel_mul(self.value(x), self.value(scale))?;
        let rg = self.rg(x) || self.rg(scale);
        Ok(self.push(v, Op::ChannelMul(x, scale), rg))
    }

    pub fn channel_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = ops::channel_add(self.value(x), self.value(bias))?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(v, Op::ChannelAdd(x, bias), rg))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, spec: Conv2dSpec) -> Result<Var> {
        let v = ops::conv2d(self.value(input), self.value(weight), &spec)?;
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(v, Op::Conv2d { input, weight, spec }, rg))
    }

    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, stride: usize) -> Result<Var> {
        let v = ops::conv_transpose2d(self.value(input), self.value(weight), stride)?;
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(v, Op::ConvTranspose2d { input, weight, stride }, rg))
    }

    /// Training-mode batch norm. Returns the output and the batch
    /// statistics (mean, biased variance) for running-average updates.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<f32>, Vec<f32>)> {
        let (v, saved) = ops::batch_norm_train(self.value(input), self.value(gamma), self.value(beta))?;
        let (mean, var) = (saved.mean.clone(), saved.var.clone());
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let out = self.push(v, Op::BatchNorm { input, gamma, beta, saved }, rg);
        Ok((out, mean, var))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| t.max(0.0));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Keeps the top-left `h × w` window of the last two axes of a rank-4 tensor.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let src = self.value(x);
        src.expect_rank(4, "crop")?;
        let [b, c, sh, sw] = [src.dim(0), src.dim(1), src.dim(2), src.dim(3)];
        if h > sh || w > sw {
            return Err(shape_err!("crop {h}x{w} larger than {sh}x{sw}"));
        }
        let mut out = Vec::with_capacity(b * c * h * w);
        for plane in src.data().chunks(sh * sw) {
            for y in 0..h {
                out.extend_from_slice(&plane[y * sw..y * sw + w]);
            }
        }
        let v = Tensor::new(vec![b, c, h, w], out)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Crop(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).data().iter().map(|t| t * t).sum());
        let rg = self.rg(x);
        self.push(v, Op::SumSquares(x), rg)
    }

    pub fn sum_abs(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).data().iter().map(|t| t.abs()).sum());
        let rg = self.rg(x);
        self.push(v, Op::SumAbs(x), rg)
    }

    /// Batch-mean cross entropy against (possibly soft) target rows.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let (loss, softmax) = ops::softmax_cross_entropy(self.value(logits), targets)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, targets: targets.clone(), softmax },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::StraightThrough(shadow) => self.accumulate(grads, *shadow, g.clone())?,
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = ops::matmul(g, &self.value(*b).transpose()?)?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.rg(*b) {
                    let gb = ops::matmul(&self.value(*a).transpose()?, g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?)?,
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::ChannelMul(x, s) => {
                let (gx, gs) = ops::channel_mul_backward(self.value(*x), self.value(*s), g)?;
                self.accumulate(grads, *x, gx)?;
                self.accumulate(grads, *s, gs)?;
            }
            Op::ChannelAdd(x, b) => {
                let gb = Tensor::new(self.value(*b).shape().to_vec(), ops::channel_sum(g)?)?;
                self.accumulate(grads, *x, g.clone())?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::Conv2d { input, weight, spec } => {
                let (gi, gw) = ops::conv2d_backward(self.value(*input), self.value(*weight), spec, g)?;
                self.accumulate(grads, *input, gi)?;
                self.accumulate(grads, *weight, gw)?;
            }
            Op::ConvTranspose2d { input, weight, stride } => {
                let (gi, gw) = ops::conv_transpose2d_backward(self.value(*input), self.value(*weight), *stride, g)?;
                self.accumulate(grads, *input, gi)?;
                self.accumulate(grads, *weight, gw)?;
            }
            Op::BatchNorm { input, gamma, beta, saved } => {
                let (gx, gg, gb) = ops::batch_norm_backward(saved, self.value(*gamma), g)?;
                self.accumulate(grads, *input, gx)?;
                self.accumulate(grads, *gamma, gg)?;
                self.accumulate(grads, *beta, gb)?;
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Reshape(x) => {
                let gx = g.reshape(self.value(*x).shape())?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Crop(x) => {
                let src = self.value(*x);
                let [sh, sw] = [src.dim(2), src.dim(3)];
                let [h, w] = [g.dim(2), g.dim(3)];
                let mut gx = Tensor::zeros(src.shape());
                for (dst, gp) in gx.data_mut().chunks_mut(sh * sw).zip(g.data().chunks(h * w)) {
                    for y in 0..h {
                        dst[y * sw..y * sw + w].copy_from_slice(&gp[y * w..(y + 1) * w]);
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Sum(x) => {
                let s = g.item()?;
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), s))?;
            }
            Op::SumSquares(x) => {
                let s = g.item()?;
                self.accumulate(grads, *x, self.value(*x).scale(2.0 * s))?;
            }
            Op::SumAbs(x) => {
                let s = g.item()?;
                let gx = self.value(*x).map(|v| {
                    if v > 0.0 {
                        s
                    } else if v < 0.0 {
                        -s
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, gx)?;
            }
            Op::SoftmaxCrossEntropy { logits, targets, softmax } => {
                let s = g.item()? / softmax.dim(0) as f32;
                let gl = softmax.zip_map(targets, |p, t| (p - t) * s)?;
                self.accumulate(grads, *logits, gl)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn straight_through_passes_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(0.4));
        let q = g.straight_through(x, Tensor::scalar(1.0)).unwrap();
        let y = g.sum_squares(q);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(2.0));
        let a = g.scale(x, 3.0);
        let b = g.scale(x, 5.0);
        let s = g.add(a, b).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[8.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.param(7, Tensor::scalar(1.5));
        let y = g.mul(c, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.by_param().unwrap()[&7].data(), &[2.0]);
    }
}
