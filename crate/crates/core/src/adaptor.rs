//! Low-rank modal adaptors built from SVD-style triplets.
//!
//! An adaptor stores `P[rows_out, r]`, `Λ[r]` and `Q[r, rows_in]`. Its matrix
//! `M = P · diag(Λ) · Q` is reshaped into the kernel of the layer it adapts and
//! added to the shared kernel.
//!
//! Kernel layout is `[C2, C1, K, K]` (output channel first). The matrix entry
//! `M[c2·K + kh, c1·K + kw]` lands at kernel position `[c2, c1, kh, kw]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Default standard deviation for the entries of `P` and `Q`.
pub const DEFAULT_INIT_STD: f64 = 0.02;

/// Shape of the weight an adaptor attaches to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetShape {
    Conv {
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
    },
    Linear {
        out_features: usize,
        in_features: usize,
    },
}

impl TargetShape {
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            TargetShape::Conv {
                out_channels,
                in_channels,
                kernel,
            } => vec![out_channels, in_channels, kernel, kernel],
            TargetShape::Linear {
                out_features,
                in_features,
            } => vec![out_features, in_features],
        }
    }

    pub fn rows_out(&self) -> usize {
        match *self {
            TargetShape::Conv {
                out_channels, kernel, ..
            } => out_channels * kernel,
            TargetShape::Linear { out_features, .. } => out_features,
        }
    }

    pub fn rows_in(&self) -> usize {
        match *self {
            TargetShape::Conv {
                in_channels, kernel, ..
            } => in_channels * kernel,
            TargetShape::Linear { in_features, .. } => in_features,
        }
    }

    /// Largest rank allowed by the strict bound `r < min(rows_out, rows_in)`.
    pub fn max_rank(&self) -> usize {
        self.rows_out().min(self.rows_in()).saturating_sub(1)
    }

    /// `(C1, C2, K)` in the notation of the parameter-count formulas; linear layers use `K = 1`.
    pub fn geometry(&self) -> (usize, usize, usize) {
        match *self {
            TargetShape::Conv {
                out_channels,
                in_channels,
                kernel,
            } => (in_channels, out_channels, kernel),
            TargetShape::Linear {
                out_features,
                in_features,
            } => (in_features, out_features, 1),
        }
    }

    /// For each flat kernel position, the flat matrix position it is read from.
    /// `None` when the layout is the identity.
    pub fn kernel_index_map(&self) -> Option<Vec<usize>> {
        match *self {
            TargetShape::Linear { .. } => None,
            TargetShape::Conv {
                out_channels,
                in_channels,
                kernel,
            } => {
                let cols = in_channels * kernel;
                let mut map = Vec::with_capacity(out_channels * in_channels * kernel * kernel);
                for c2 in 0..out_channels {
                    for c1 in 0..in_channels {
                        for kh in 0..kernel {
                            for kw in 0..kernel {
                                map.push((c2 * kernel + kh) * cols + c1 * kernel + kw);
                            }
                        }
                    }
                }
                Some(map)
            }
        }
    }
}

/// The triplet set `(P, Λ, Q)` for one layer and one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdaptor {
    p: Tensor,
    lambda: Tensor,
    q: Tensor,
    active: Vec<bool>,
    target: TargetShape,
}

/// Tape handles of one adaptor's trainable tensors.
#[derive(Clone, Copy, Debug)]
pub struct BoundAdaptor {
    pub p: Var,
    pub lambda: Var,
    pub q: Var,
}

impl LowRankAdaptor {
    /// Gaussian `P`, `Q` and zero `Λ`, so the adaptor starts as an exact zero perturbation.
    pub fn zero_start<R: Rng + ?Sized>(target: TargetShape, rank: usize, init_std: f64, rng: &mut R) -> Result<Self> {
        check_rank(&target, rank)?;
        let p = Tensor::randn(vec![target.rows_out(), rank], init_std, rng);
        let q = Tensor::randn(vec![rank, target.rows_in()], init_std, rng);
        Ok(Self {
            p,
            lambda: Tensor::zeros(vec![rank]),
            q,
            active: vec![true; rank],
            target,
        })
    }

    pub fn from_parts(target: TargetShape, p: Tensor, lambda: Tensor, q: Tensor, active: Vec<bool>) -> Result<Self> {
        let rank = lambda.numel();
        check_rank(&target, rank)?;
        if p.shape() != [target.rows_out(), rank]
            || q.shape() != [rank, target.rows_in()]
            || lambda.shape() != [rank]
            || active.len() != rank
        {
            return Err(Error::shape(
                "adaptor",
                format!(
                    "P {:?}, Lambda {:?}, Q {:?}, mask {} inconsistent with target {:?}",
                    p.shape(),
                    lambda.shape(),
                    q.shape(),
                    active.len(),
                    target
                ),
            ));
        }
        if let Some(i) = (0..rank).find(|&i| !active[i] && lambda.data()[i] != 0.0) {
            return Err(Error::InvalidArgument(format!(
                "masked triplet {} has nonzero singular value {}",
                i,
                lambda.data()[i]
            )));
        }
        Ok(Self {
            p,
            lambda,
            q,
            active,
            target,
        })
    }

    pub fn target(&self) -> TargetShape {
        self.target
    }

    /// Stored triplets, active or not.
    pub fn rank(&self) -> usize {
        self.active.len()
    }

    pub fn active_rank(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn p(&self) -> &Tensor {
        &self.p
    }

    pub fn lambda(&self) -> &Tensor {
        &self.lambda
    }

    pub fn q(&self) -> &Tensor {
        &self.q
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.active[i]
    }

    pub fn p_mut(&mut self) -> &mut Tensor {
        &mut self.p
    }

    pub fn q_mut(&mut self) -> &mut Tensor {
        &mut self.q
    }

    /// Mutable `Λ`. Callers must keep masked entries at zero; see [`Self::set_triplet`].
    pub fn lambda_mut(&mut self) -> &mut Tensor {
        &mut self.lambda
    }

    /// `[P, Λ, Q]` borrowed together. Masked `Λ` entries must stay zero.
    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.p, &mut self.lambda, &mut self.q]
    }

    /// Sets triplet `i` active with singular value `value`, or inactive with value zero.
    pub fn set_triplet(&mut self, i: usize, active: bool, value: f64) {
        self.active[i] = active;
        self.lambda.data_mut()[i] = if active { value } else { 0.0 };
    }

    /// Number of stored scalars in `P`, `Λ` and `Q`.
    pub fn stored_params(&self) -> usize {
        self.p.numel() + self.lambda.numel() + self.q.numel()
    }

    /// `M = P · diag(Λ) · Q` over active triplets, row-major `[rows_out, rows_in]`.
    pub fn matrix(&self) -> Vec<f64> {
        ops::lowrank_product(&self.p, &self.lambda, &self.q, &self.active).expect("validated adaptor")
    }

    /// The adaptor kernel in the target layer's weight shape.
    pub fn materialize(&self) -> Tensor {
        let m = self.matrix();
        let data = match self.target.kernel_index_map() {
            Some(map) => map.iter().map(|&i| m[i]).collect(),
            None => m,
        };
        Tensor::new(self.target.dims(), data).expect("target dims match matrix size")
    }

    /// Drops inactive triplets from storage and returns the indices that were kept.
    pub fn compact(&mut self) -> Vec<usize> {
        let keep: Vec<usize> = (0..self.rank()).filter(|&i| self.active[i]).collect();
        let (ro, ri, r) = (self.target.rows_out(), self.target.rows_in(), self.rank());
        self.p = Tensor::new(vec![ro, keep.len()], select_columns(self.p.data(), ro, r, &keep)).expect("shape");
        self.q = Tensor::new(vec![keep.len(), ri], select_rows(self.q.data(), ri, &keep)).expect("shape");
        self.lambda = Tensor::new(vec![keep.len()], keep.iter().map(|&i| self.lambda.data()[i]).collect()).expect("shape");
        self.active = vec![true; keep.len()];
        keep
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundAdaptor {
        BoundAdaptor {
            p: tape.param(&self.p),
            lambda: tape.param(&self.lambda),
            q: tape.param(&self.q),
        }
    }

    /// Records the materialized adaptor kernel on `tape`.
    pub fn record_kernel(&self, tape: &mut Tape, bound: &BoundAdaptor) -> Result<Var> {
        let m = tape.lowrank(bound.p, bound.lambda, bound.q, &self.active)?;
        match self.target.kernel_index_map() {
            Some(map) => tape.gather(m, map, self.target.dims()),
            None => Ok(m),
        }
    }
}

fn check_rank(target: &TargetShape, rank: usize) -> Result<()> {
    if rank > target.max_rank() {
        return Err(Error::InvalidArgument(format!(
            "rank {} violates r < min({}, {}) for {:?}",
            rank,
            target.rows_out(),
            target.rows_in(),
            target
        )));
    }
    Ok(())
}

/// Columns `keep` of a row-major `[rows, cols]` matrix.
pub(crate) fn select_columns(data: &[f64], rows: usize, cols: usize, keep: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * keep.len());
    for r in 0..rows {
        out.extend(keep.iter().map(|&c| data[r * cols + c]));
    }
    out
}

/// Rows `keep` of a row-major matrix with `cols` columns.
pub(crate) fn select_rows(data: &[f64], cols: usize, keep: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(cols * keep.len());
    for &r in keep {
        out.extend_from_slice(&data[r * cols..(r + 1) * cols]);
    }
    out
}

/// `K_shared + materialize(adaptor)`.
pub fn merged_kernel(shared: &Tensor, adaptor: &LowRankAdaptor) -> Result<Tensor> {
    if shared.shape() != adaptor.target.dims().as_slice() {
        return Err(Error::shape(
            "merged_kernel",
            format!(
                "shared kernel {:?} vs adaptor target {:?}",
                shared.shape(),
                adaptor.target.dims()
            ),
        ));
    }
    shared.add(&adaptor.materialize())
}

/// Closed-form parameter accounting for one layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParamCountReport {
    /// `r (K (C1 + C2) + 1)`
    pub adaptor_params: usize,
    /// `C1 · C2 · K²`
    pub shared_params: usize,
    /// Largest `r` with `adaptor_params <= shared_params`.
    pub admissible_rank_bound: usize,
    /// `adaptor_params / shared_params · 100`
    pub increment_percent: f64,
}

pub fn count_params(c1: usize, c2: usize, k: usize, r: usize) -> ParamCountReport {
    let per_rank = k * (c1 + c2) + 1;
    let shared = c1 * c2 * k * k;
    let adaptor = r * per_rank;
    ParamCountReport {
        adaptor_params: adaptor,
        shared_params: shared,
        admissible_rank_bound: shared / per_rank,
        increment_percent: if shared == 0 {
            0.0
        } else {
            adaptor as f64 / shared as f64 * 100.0
        },
    }
}
