//! First-order update rules with per-parameter state keyed by name.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adaptor::{select_columns, select_rows};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// `w ← w − η·g`.
    Sgd,
    Adam {
        #[serde(default = "default_adam_beta1")]
        beta1: f64,
        #[serde(default = "default_adam_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_adam_beta1() -> f64 {
    0.9
}

fn default_adam_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: default_adam_beta1(),
            beta2: default_adam_beta2(),
            eps: default_adam_eps(),
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if let OptimizerKind::Adam { beta1, beta2, eps } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                errs.push("optimizer Adam betas must lie in [0, 1)".into());
            }
            if !(eps > 0.0) {
                errs.push("optimizer Adam eps must be positive".into());
            }
        }
        errs
    }
}

/// First and second moment estimates for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    /// Completed steps, drives Adam's bias correction.
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        let errs = kind.problems();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        Ok(Self {
            kind,
            lr,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    pub fn insert_moments(&mut self, name: String, moments: Moments) {
        self.moments.insert(name, moments);
    }

    /// Marks the start of a new optimizer step; call once before the per-tensor updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// New values for `values` given `grad`, advancing the state stored under `name`.
    pub fn propose(&mut self, name: &str, values: &[f64], grad: &[f64]) -> Result<Vec<f64>> {
        if values.len() != grad.len() {
            return Err(Error::shape(
                "optimizer",
                format!("{name}: {} values, {} gradient entries", values.len(), grad.len()),
            ));
        }
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => Ok(values.iter().zip(grad).map(|(w, g)| w - lr * g).collect()),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step.max(1) as i32;
                let st = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                    m: vec![0.0; values.len()],
                    v: vec![0.0; values.len()],
                });
                if st.m.len() != values.len() {
                    return Err(Error::shape("optimizer", format!("{name}: state size changed")));
                }
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let mut out = Vec::with_capacity(values.len());
                for j in 0..values.len() {
                    let g = grad[j];
                    st.m[j] = beta1 * st.m[j] + (1.0 - beta1) * g;
                    st.v[j] = beta2 * st.v[j] + (1.0 - beta2) * g * g;
                    let mhat = st.m[j] / c1;
                    let vhat = st.v[j] / c2;
                    out.push(values[j] - lr * mhat / (vhat.sqrt() + eps));
                }
                Ok(out)
            }
        }
    }

    /// Updates `tensor` in place from its stored gradient.
    pub fn step_tensor(&mut self, name: &str, tensor: &mut Tensor) -> Result<()> {
        let grad = tensor
            .grad()
            .ok_or_else(|| Error::InvalidArgument(format!("{name}: no gradient")))?
            .to_vec();
        let next = self.propose(name, tensor.data(), &grad)?;
        tensor.data_mut().copy_from_slice(&next);
        Ok(())
    }

    /// Restricts the state of an adaptor's `P` (`[rows, rank]`), `Λ` and `Q` (`[rank, cols]`)
    /// to the kept triplets, matching [`crate::adaptor::LowRankAdaptor::compact`].
    pub fn compact_adaptor(&mut self, prefix: &str, rows: usize, rank: usize, cols: usize, keep: &[usize]) {
        let cut = |st: &mut Moments, f: &dyn Fn(&[f64]) -> Vec<f64>| {
            st.m = f(&st.m);
            st.v = f(&st.v);
        };
        if let Some(st) = self.moments.get_mut(&format!("{prefix}.P")) {
            cut(st, &|d| select_columns(d, rows, rank, keep));
        }
        if let Some(st) = self.moments.get_mut(&format!("{prefix}.Lambda")) {
            cut(st, &|d| keep.iter().map(|&i| d[i]).collect());
        }
        if let Some(st) = self.moments.get_mut(&format!("{prefix}.Q")) {
            cut(st, &|d| select_rows(d, cols, keep));
        }
    }
}
