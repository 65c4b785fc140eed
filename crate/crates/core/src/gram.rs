//! Layer Hessian `H = X^T X`: accumulation, damping, inversion and the
//! diagonal scaler `D = sqrt(diag(H))`.

use std::cell::Cell;
use std::str::FromStr;

use nalgebra::{Cholesky, DVector};

use crate::error::{Error, Result};
use crate::types::{CalibrationActivations, Matrix};

/// Rows folded into the Gram accumulator per block.
pub const GRAM_BLOCK_ROWS: usize = 512;

thread_local! {
    static INVERSIONS: Cell<usize> = const { Cell::new(0) };
}

/// Number of Hessian inversions performed on the current thread.
pub fn inversion_count() -> usize {
    INVERSIONS.with(Cell::get)
}

pub fn reset_inversion_count() {
    INVERSIONS.with(|c| c.set(0));
}

/// Streams row blocks of `X` into `X^T X`.
///
/// Blocks are added in arrival order, so a fixed block size gives
/// bit-identical output.
#[derive(Debug, Clone)]
pub struct GramAccumulator {
    sum: Matrix,
    rows: usize,
}

impl GramAccumulator {
    pub fn new(width: usize) -> Self {
        Self { sum: Matrix::zeros(width, width), rows: 0 }
    }

    pub fn add_block(&mut self, block: &Matrix) -> Result<()> {
        if block.ncols() != self.sum.ncols() {
            return Err(Error::contract(format!(
                "activation block has {} columns, expected {}",
                block.ncols(),
                self.sum.ncols()
            )));
        }
        if !block.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("activations contain non-finite entries"));
        }
        self.sum.gemm_tr(1.0, block, block, 1.0);
        self.rows += block.nrows();
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn finish(self) -> Matrix {
        symmetrize(self.sum)
    }
}

fn symmetrize(a: Matrix) -> Matrix {
    (&a + a.transpose()) * 0.5
}

/// `X^T X`, accumulated in blocks of [`GRAM_BLOCK_ROWS`] rows.
pub fn build_gram(x: &CalibrationActivations) -> Result<Matrix> {
    let x = x.matrix();
    let mut acc = GramAccumulator::new(x.ncols());
    let mut start = 0;
    while start < x.nrows() {
        let len = GRAM_BLOCK_ROWS.min(x.nrows() - start);
        acc.add_block(&x.rows(start, len).into_owned())?;
        start += len;
    }
    Ok(acc.finish())
}

/// How the damping constant is derived from `percdamp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DampConvention {
    /// `lambda = percdamp * mean(diag(H))`.
    #[default]
    MeanDiag,
    /// `lambda = percdamp * Tr(H)`.
    Trace,
}

impl FromStr for DampConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-diag" => Ok(DampConvention::MeanDiag),
            "trace" => Ok(DampConvention::Trace),
            other => Err(Error::Parse(format!("unknown damping convention `{other}`"))),
        }
    }
}

impl DampConvention {
    pub fn as_str(self) -> &'static str {
        match self {
            DampConvention::MeanDiag => "mean-diag",
            DampConvention::Trace => "trace",
        }
    }
}

/// Damped layer Hessian with everything the solvers derive from it.
///
/// Built once per layer; the inverse and its Cholesky factor are computed
/// at construction and shared by every alternating iteration.
#[derive(Debug, Clone)]
pub struct GramHessian {
    raw: Matrix,
    damped: Matrix,
    lambda: f64,
    scaler: DVector<f64>,
    inverse: Matrix,
    inverse_chol_upper: Matrix,
    scaled: Matrix,
}

impl GramHessian {
    /// `raw + lambda I`, factorized.
    pub fn with_lambda(raw: Matrix, lambda: f64) -> Result<Self> {
        if raw.nrows() != raw.ncols() {
            return Err(Error::contract("Hessian must be square"));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::contract(format!("damping must be finite and >= 0, got {lambda}")));
        }
        if !raw.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("Hessian contains non-finite entries"));
        }
        let raw = symmetrize(raw);
        let n = raw.nrows();
        let damped = &raw + Matrix::identity(n, n) * lambda;

        INVERSIONS.with(|c| c.set(c.get() + 1));
        let chol = Cholesky::new(damped.clone()).ok_or_else(|| {
            let diag = damped.diagonal();
            Error::numeric(format!(
                "Cholesky of damped Hessian failed (n = {n}, lambda = {lambda:e}, \
                 diag min = {:e}, diag max = {:e})",
                diag.min(),
                diag.max()
            ))
        })?;
        let inverse = symmetrize(chol.inverse());
        let inverse_chol_upper = Cholesky::new(inverse.clone())
            .ok_or_else(|| Error::numeric("Cholesky of inverse Hessian failed"))?
            .l()
            .transpose();

        let scaler = damped.diagonal().map(f64::sqrt);
        if scaler.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::numeric("damped Hessian has a nonpositive diagonal"));
        }
        let scaled = Matrix::from_fn(n, n, |i, j| damped[(i, j)] / (scaler[i] * scaler[j]));

        Ok(Self { raw, damped, lambda, scaler, inverse, inverse_chol_upper, scaled })
    }

    pub fn dim(&self) -> usize {
        self.raw.nrows()
    }

    /// Undamped `X^T X`.
    pub fn raw(&self) -> &Matrix {
        &self.raw
    }

    /// `X^T X + lambda I`.
    pub fn damped(&self) -> &Matrix {
        &self.damped
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `D_ii = sqrt(H_ii)` of the damped Hessian.
    pub fn scaler(&self) -> &DVector<f64> {
        &self.scaler
    }

    pub fn inverse(&self) -> &Matrix {
        &self.inverse
    }

    /// Upper-triangular `R` with `R^T R = H^-1`.
    pub fn inverse_chol_upper(&self) -> &Matrix {
        &self.inverse_chol_upper
    }

    /// `D^-1 H D^-1`, unit diagonal.
    pub fn scaled(&self) -> &Matrix {
        &self.scaled
    }
}

/// Damps a Gram matrix and caches its factorizations.
pub fn dampen(h: Matrix, percdamp: f64, convention: DampConvention) -> Result<GramHessian> {
    if !(percdamp > 0.0 && percdamp.is_finite()) {
        return Err(Error::contract(format!("percdamp must be positive, got {percdamp}")));
    }
    if h.nrows() != h.ncols() || h.nrows() == 0 {
        return Err(Error::contract("Hessian must be square and non-empty"));
    }
    let trace = h.trace();
    let lambda = match convention {
        DampConvention::MeanDiag => percdamp * trace / h.nrows() as f64,
        DampConvention::Trace => percdamp * trace,
    };
    if !(lambda > 0.0) {
        return Err(Error::numeric(format!(
            "Hessian is singular: damping constant is {lambda:e} (zero diagonal)"
        )));
    }
    GramHessian::with_lambda(h, lambda)
}

/// The diagonal scaler `D = sqrt(diag(H))` of a damped Hessian.
pub fn diag_scaler(h: &GramHessian) -> Result<DVector<f64>> {
    let d = h.scaler();
    if d.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::contract("Hessian diagonal must be positive"));
    }
    Ok(d.clone())
}
