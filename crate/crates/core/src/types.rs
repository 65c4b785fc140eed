//! Shared domain types and the layer-wise reconstruction objective.
//!
//! Weight matrices follow the `N_in x N_out` orientation: rows index layer
//! inputs, columns index layer outputs, and a layer computes `X * W`.

use std::fmt;

use nalgebra::DMatrix;

use crate::altmin::AltMinConfig;
use crate::error::{Error, Result};
use crate::gram::GramHessian;

pub type Matrix = DMatrix<f64>;
pub type Mask = DMatrix<bool>;

fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(format!("{what} contains non-finite entries")))
    }
}

/// Dense layer weights, `N_in x N_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseWeights(Matrix);

impl DenseWeights {
    pub fn new(data: Matrix) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::contract("weights must have at least one row and one column"));
        }
        ensure_finite(&data, "weights")?;
        Ok(Self(data))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn n_in(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.0.ncols()
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }
}

/// Calibration inputs to a layer, one sample (token position) per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationActivations(Matrix);

impl CalibrationActivations {
    pub fn new(data: Matrix) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::contract("activations need at least one sample row"));
        }
        ensure_finite(&data, "activations")?;
        Ok(Self(data))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn samples(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }
}

/// How an unstructured nonzero budget is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Granularity {
    /// `k` nonzeros in the whole matrix.
    #[default]
    PerMatrix,
    /// `k` nonzeros in every output column.
    PerColumn,
}

/// The sparsity constraint set for the sparse component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparsityPattern {
    Dense,
    Unstructured { k: usize, granularity: Granularity },
    /// At most `n` nonzeros in every run of `m` consecutive inputs of one
    /// output column.
    SemiStructured { n: usize, m: usize },
}

impl SparsityPattern {
    pub fn unstructured(k: usize) -> Self {
        SparsityPattern::Unstructured { k, granularity: Granularity::PerMatrix }
    }

    pub fn per_column(k: usize) -> Self {
        SparsityPattern::Unstructured { k, granularity: Granularity::PerColumn }
    }

    pub fn n_m(n: usize, m: usize) -> Self {
        SparsityPattern::SemiStructured { n, m }
    }

    /// Checks that the pattern is well formed for an `n_in x n_out` matrix.
    pub fn validate(&self, n_in: usize, n_out: usize) -> Result<()> {
        match *self {
            SparsityPattern::Dense => Ok(()),
            SparsityPattern::Unstructured { k, granularity: Granularity::PerMatrix } => {
                if k > n_in * n_out {
                    Err(Error::contract(format!(
                        "nonzero budget {k} exceeds matrix size {n_in}x{n_out}"
                    )))
                } else {
                    Ok(())
                }
            }
            SparsityPattern::Unstructured { k, granularity: Granularity::PerColumn } => {
                if k > n_in {
                    Err(Error::contract(format!(
                        "per-column budget {k} exceeds column length {n_in}"
                    )))
                } else {
                    Ok(())
                }
            }
            SparsityPattern::SemiStructured { n, m } => {
                if n == 0 || n > m {
                    Err(Error::contract(format!("invalid N:M pattern {n}:{m}")))
                } else if n_in % m != 0 {
                    Err(Error::contract(format!(
                        "N_in = {n_in} is not divisible by group size {m}"
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Pure feasibility predicate on a support mask.
    pub fn is_feasible(&self, mask: &Mask) -> bool {
        let (n_in, n_out) = mask.shape();
        if self.validate(n_in, n_out).is_err() {
            return false;
        }
        match *self {
            SparsityPattern::Dense => true,
            SparsityPattern::Unstructured { k, granularity: Granularity::PerMatrix } => {
                mask.iter().filter(|&&b| b).count() <= k
            }
            SparsityPattern::Unstructured { k, granularity: Granularity::PerColumn } => mask
                .column_iter()
                .all(|c| c.iter().filter(|&&b| b).count() <= k),
            SparsityPattern::SemiStructured { n, m } => mask.column_iter().all(|c| {
                c.as_slice()
                    .chunks(m)
                    .all(|g| g.iter().filter(|&&b| b).count() <= n)
            }),
        }
    }

    /// Number of nonzeros the pattern admits for an `n_in x n_out` matrix.
    pub fn capacity(&self, n_in: usize, n_out: usize) -> usize {
        match *self {
            SparsityPattern::Dense => n_in * n_out,
            SparsityPattern::Unstructured { k, granularity: Granularity::PerMatrix } => k,
            SparsityPattern::Unstructured { k, granularity: Granularity::PerColumn } => k * n_out,
            SparsityPattern::SemiStructured { n, m } => n_in / m * n * n_out,
        }
    }

    /// Hard-thresholding under the pattern: keeps the highest scores.
    ///
    /// Ties go to the lowest row-major flat index.
    pub fn select_support(&self, scores: &Matrix) -> Result<Mask> {
        let (n_in, n_out) = scores.shape();
        self.validate(n_in, n_out)?;
        ensure_finite(scores, "importance scores")?;
        let mut mask = Mask::from_element(n_in, n_out, false);
        match *self {
            SparsityPattern::Dense => mask.fill(true),
            SparsityPattern::Unstructured { k, granularity: Granularity::PerMatrix } => {
                let cands = (0..n_in)
                    .flat_map(|i| (0..n_out).map(move |j| (i, j)))
                    .map(|(i, j)| (scores[(i, j)], i * n_out + j));
                for idx in top_k(cands, k) {
                    mask[(idx / n_out, idx % n_out)] = true;
                }
            }
            SparsityPattern::Unstructured { k, granularity: Granularity::PerColumn } => {
                for j in 0..n_out {
                    for i in top_k((0..n_in).map(|i| (scores[(i, j)], i)), k) {
                        mask[(i, j)] = true;
                    }
                }
            }
            SparsityPattern::SemiStructured { n, m } => {
                for j in 0..n_out {
                    for g in (0..n_in).step_by(m) {
                        for i in top_k((g..g + m).map(|i| (scores[(i, j)], i)), n) {
                            mask[(i, j)] = true;
                        }
                    }
                }
            }
        }
        Ok(mask)
    }
}

impl fmt::Display for SparsityPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            SparsityPattern::Dense => write!(f, "dense"),
            SparsityPattern::Unstructured { k, granularity: Granularity::PerMatrix } => {
                write!(f, "k:{k}")
            }
            SparsityPattern::Unstructured { k, granularity: Granularity::PerColumn } => {
                write!(f, "k:{k}/column")
            }
            SparsityPattern::SemiStructured { n, m } => write!(f, "{n}:{m}"),
        }
    }
}

/// Returns the keys of the `k` highest-scoring candidates.
///
/// Candidates are `(score, key)`; ties are broken by the smaller key.
pub(crate) fn top_k(cands: impl Iterator<Item = (f64, usize)>, k: usize) -> Vec<usize> {
    let mut cands: Vec<(f64, usize)> = cands.collect();
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    cands.truncate(k);
    cands.into_iter().map(|(_, key)| key).collect()
}

/// Sparse component stored densely alongside its support.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseComponent {
    values: Matrix,
    mask: Mask,
}

impl SparseComponent {
    pub fn new(values: Matrix, mask: Mask) -> Result<Self> {
        if values.shape() != mask.shape() {
            return Err(Error::contract("sparse values and mask shapes differ"));
        }
        if values.iter().zip(mask.iter()).any(|(&v, &keep)| !keep && v != 0.0) {
            return Err(Error::contract("sparse values are nonzero outside the mask"));
        }
        Ok(Self { values, mask })
    }

    /// Restricts `w` to `mask`.
    pub fn from_mask(w: &Matrix, mask: Mask) -> Result<Self> {
        if w.shape() != mask.shape() {
            return Err(Error::contract("weights and mask shapes differ"));
        }
        let values = w.zip_map(&mask, |v, keep| if keep { v } else { 0.0 });
        Ok(Self { values, mask })
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { values: Matrix::zeros(n_in, n_out), mask: Mask::from_element(n_in, n_out, false) }
    }

    /// Uses the nonzero entries of `values` as the support.
    pub fn from_values(values: Matrix) -> Self {
        let mask = values.map(|v| v != 0.0);
        Self { values, mask }
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn nnz(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// Low-rank term `M = U V^T` with `U: N_in x r` and `V: N_out x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    pub u: Matrix,
    pub v: Matrix,
}

impl LowRankFactors {
    pub fn new(u: Matrix, v: Matrix) -> Result<Self> {
        if u.ncols() != v.ncols() {
            return Err(Error::contract(format!(
                "factor ranks differ: U has {} columns, V has {}",
                u.ncols(),
                v.ncols()
            )));
        }
        Ok(Self { u, v })
    }

    pub fn zeros(n_in: usize, n_out: usize, rank: usize) -> Self {
        Self { u: Matrix::zeros(n_in, rank), v: Matrix::zeros(n_out, rank) }
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn product(&self) -> Matrix {
        &self.u * self.v.transpose()
    }
}

/// Numerical rank: singular values above `1e-10 * sigma_max`.
pub fn numeric_rank(m: &Matrix) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > 1e-10 * max).count()
}

/// Which alternating half-step produced a trace entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HalfStep {
    Sparse,
    LowRank,
}

impl HalfStep {
    pub fn label(self) -> &'static str {
        match self {
            HalfStep::Sparse => "P1",
            HalfStep::LowRank => "P2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub iter: usize,
    pub half_step: HalfStep,
    /// Objective under the damped Hessian, the quantity being minimized.
    pub objective_damped: f64,
    /// Objective under the undamped Gram matrix `X^T X`.
    pub objective_raw: f64,
}

#[derive(Debug, Clone)]
pub struct DecompositionResult {
    pub sparse: SparseComponent,
    pub lowrank: LowRankFactors,
    pub trace: Vec<TraceEntry>,
    pub config: AltMinConfig,
    pub pattern: SparsityPattern,
}

impl DecompositionResult {
    /// `W_S + U V^T`.
    pub fn compressed(&self) -> Matrix {
        self.sparse.values() + self.lowrank.product()
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.trace.last().map(|e| e.objective_damped)
    }
}

/// `Tr(D^T H D)`, computed as `sum(D .* (H D))`.
pub fn trace_quadratic(h: &Matrix, delta: &Matrix) -> Result<f64> {
    if h.nrows() != h.ncols() || h.ncols() != delta.nrows() {
        return Err(Error::contract(format!(
            "Hessian {}x{} does not match residual {}x{}",
            h.nrows(),
            h.ncols(),
            delta.nrows(),
            delta.ncols()
        )));
    }
    let value = delta.dot(&(h * delta));
    if !value.is_finite() {
        return Err(Error::numeric("objective is not finite"));
    }
    // PSD forms only go negative through rounding.
    Ok(value.max(0.0))
}

/// Residual `W_hat - (W_S + U V^T)`.
pub fn residual(w_hat: &Matrix, sparse: &Matrix, factors: &LowRankFactors) -> Result<Matrix> {
    let shape = w_hat.shape();
    if sparse.shape() != shape
        || factors.u.nrows() != shape.0
        || factors.v.nrows() != shape.1
    {
        return Err(Error::contract("component shapes do not match the weights"));
    }
    let mut delta = w_hat - sparse;
    delta.gemm(-1.0, &factors.u, &factors.v.transpose(), 1.0);
    Ok(delta)
}

/// Layer-wise reconstruction error `Tr(D^T H D)` with `D = W_hat - (W_S + U V^T)`,
/// under the damped Hessian.
pub fn reconstruction_objective(
    h: &GramHessian,
    w_hat: &DenseWeights,
    sparse: &SparseComponent,
    factors: &LowRankFactors,
) -> Result<f64> {
    let delta = residual(w_hat.matrix(), sparse.values(), factors)?;
    trace_quadratic(h.damped(), &delta)
}

/// The same error under the undamped Gram matrix, i.e. `||X D||_F^2`.
pub fn reconstruction_objective_raw(
    h: &GramHessian,
    w_hat: &DenseWeights,
    sparse: &SparseComponent,
    factors: &LowRankFactors,
) -> Result<f64> {
    let delta = residual(w_hat.matrix(), sparse.values(), factors)?;
    trace_quadratic(h.raw(), &delta)
}
