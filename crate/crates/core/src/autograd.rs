//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation in execution order, which is already a
//! topological order: an operation can only consume values that exist. Backward
//! replays the tape in reverse and visits each node once, accumulating
//! gradients additively when a value feeds several consumers.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    Add(Var, Var),
    Sum(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    AvgPoolGlobal(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    MeanSquaredError {
        pred: Var,
        target: Vec<f64>,
    },
    LowRank {
        p: Var,
        lambda: Var,
        q: Var,
    },
    Gather {
        input: Var,
        index: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations; see the module docs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
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
        debug_assert!(value.grad().is_none());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.clear_grad();
        self.push(value, Op::Constant, false)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: &Tensor) -> Var {
        let mut value = value.clone();
        value.clear_grad();
        self.push(value, Op::Param, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let out = ops::conv2d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let rg = self.needs(input) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = ops::linear(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let rg = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Linear { input, weight, bias }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = ops::relu(self.value(a));
        let rg = self.needs(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn avg_pool_global(&mut self, a: Var) -> Result<Var> {
        let out = ops::avg_pool_global(self.value(a))?;
        let rg = self.needs(a);
        Ok(self.push(out, Op::AvgPoolGlobal(a), rg))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy(self.value(logits), labels)?;
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean of squared differences against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", p.shape(), target.shape()),
            ));
        }
        let n = p.numel() as f64;
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let rg = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MeanSquaredError {
                pred,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// `P · diag(Λ) · Q` over the triplets flagged in `active`, as a `[rows_out, rows_in]` matrix.
    pub fn lowrank(&mut self, p: Var, lambda: Var, q: Var, active: &[bool]) -> Result<Var> {
        let m = ops::lowrank_product(self.value(p), self.value(lambda), self.value(q), active)?;
        let shape = vec![self.value(p).shape()[0], self.value(q).shape()[1]];
        let rg = self.needs(p) || self.needs(lambda) || self.needs(q);
        Ok(self.push(Tensor::new(shape, m)?, Op::LowRank { p, lambda, q }, rg))
    }

    /// `out[j] = input[index[j]]`, reshaped to `shape`. `index` must be a permutation
    /// (or injective selection) of input positions.
    pub fn gather(&mut self, input: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(input).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape(
                "gather",
                format!("index {} out of range for {} values", bad, src.len()),
            ));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        let rg = self.needs(input);
        Ok(self.push(out, Op::Gather { input, index }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Every trainable leaf ends up with a
    /// gradient buffer, zero-filled when the loss does not depend on it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param) && grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Which inputs of every recorded ReLU are positive, in tape order. Two tapes of the same
    /// graph with equal patterns lie on the same smooth piece of the loss.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.value(a).data().iter().map(|&x| x > 0.0));
            }
        }
        out
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sum(a) => {
                let full = vec![g[0]; self.value(*a).numel()];
                self.accumulate(grads, *a, &full);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (dx, dw, db) = ops::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    *stride,
                    *padding,
                    self.needs(*input),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, &dx);
                }
                self.accumulate(grads, *kernel, &dw);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Linear { input, weight, bias } => {
                let (dx, dw, db) =
                    ops::linear_backward(self.value(*input), self.value(*weight), g, self.needs(*input))?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, &dx);
                }
                self.accumulate(grads, *weight, &dw);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d: Vec<f64> = x
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, &d);
            }
            Op::AvgPoolGlobal(a) => {
                let s = self.value(*a).shape();
                let plane = s[2] * s[3];
                let inv = 1.0 / plane as f64;
                let mut d = vec![0.0; self.value(*a).numel()];
                for (c, &gv) in g.iter().enumerate() {
                    d[c * plane..(c + 1) * plane].fill(gv * inv);
                }
                self.accumulate(grads, *a, &d);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut d = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] -= 1.0;
                }
                for v in &mut d {
                    *v *= scale;
                }
                self.accumulate(grads, *logits, &d);
            }
            Op::MeanSquaredError { pred, target } => {
                let p = self.value(*pred).data();
                let scale = 2.0 * g[0] / p.len() as f64;
                let d: Vec<f64> = p.iter().zip(target).map(|(a, b)| scale * (a - b)).collect();
                self.accumulate(grads, *pred, &d);
            }
            Op::LowRank { p, lambda, q } => {
                let (dp, dl, dq) =
                    ops::lowrank_backward(self.value(*p), self.value(*lambda), self.value(*q), g)?;
                self.accumulate(grads, *p, &dp);
                self.accumulate(grads, *lambda, &dl);
                self.accumulate(grads, *q, &dq);
            }
            Op::Gather { input, index } => {
                let mut d = vec![0.0; self.value(*input).numel()];
                for (j, &i) in index.iter().enumerate() {
                    d[i] += g[j];
                }
                self.accumulate(grads, *input, &d);
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, delta: &[f64]) {
        if !self.needs(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }
}
