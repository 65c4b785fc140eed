//! Solvers for the sparse half-step: minimize `Tr((W - S)^T H (W - S))`
//! over `S` in the sparsity pattern.
//!
//! * Magnitude: hard-thresholding, exact for `H = I`.
//! * Wanda: hard-thresholding of `D W`, exact for diagonal `H = D^2`.
//! * OBS: blocked optimal-brain-surgeon sweep over the input dimension using
//!   the Cholesky factor of `H^-1`, with error feedback into the rows not yet
//!   visited.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::gram::GramHessian;
use crate::types::{top_k, Granularity, Mask, Matrix, SparseComponent, SparsityPattern};

pub const DEFAULT_OBS_BLOCKSIZE: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrunerKind {
    Magnitude,
    Wanda,
    Obs { blocksize: usize },
}

impl Default for PrunerKind {
    fn default() -> Self {
        PrunerKind::Obs { blocksize: DEFAULT_OBS_BLOCKSIZE }
    }
}

impl fmt::Display for PrunerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrunerKind::Magnitude => write!(f, "magnitude"),
            PrunerKind::Wanda => write!(f, "wanda"),
            PrunerKind::Obs { .. } => write!(f, "obs"),
        }
    }
}

impl FromStr for PrunerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(PrunerKind::Magnitude),
            "wanda" => Ok(PrunerKind::Wanda),
            "obs" => Ok(PrunerKind::default()),
            other => Err(Error::Parse(format!("unknown pruner `{other}`"))),
        }
    }
}

/// Dispatches to the pruner selected by `kind`.
pub fn prune(
    kind: PrunerKind,
    w: &Matrix,
    h: &GramHessian,
    pattern: &SparsityPattern,
) -> Result<SparseComponent> {
    match kind {
        PrunerKind::Magnitude => prune_magnitude(w, pattern),
        PrunerKind::Wanda => prune_wanda(w, h.scaler(), pattern),
        PrunerKind::Obs { blocksize } => prune_obs(w, h, pattern, blocksize),
    }
}

pub fn prune_magnitude(w: &Matrix, pattern: &SparsityPattern) -> Result<SparseComponent> {
    let mask = pattern.select_support(&w.abs())?;
    SparseComponent::from_mask(w, mask)
}

/// Keeps the support maximizing `|D_ii W_ij|`; kept values are not updated.
pub fn prune_wanda(
    w: &Matrix,
    d: &DVector<f64>,
    pattern: &SparsityPattern,
) -> Result<SparseComponent> {
    if d.len() != w.nrows() {
        return Err(Error::contract(format!(
            "scaler has length {}, weights have {} rows",
            d.len(),
            w.nrows()
        )));
    }
    if d.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::contract("Wanda scaler must be strictly positive"));
    }
    let scores = Matrix::from_fn(w.nrows(), w.ncols(), |i, j| (d[i] * w[(i, j)]).abs());
    let mask = pattern.select_support(&scores)?;
    SparseComponent::from_mask(w, mask)
}

/// Blocked OBS sweep.
///
/// Rows are visited in input order. Unstructured supports are chosen at
/// each block start by ranking every not-yet-visited entry with the current
/// saliency `w^2 / R_jj^2` and committing the block's share; N:M supports
/// are chosen group by group as the sweep enters each group. The block size
/// is rounded up to a multiple of the group size so groups never straddle
/// a lazy update.
pub fn prune_obs(
    w: &Matrix,
    h: &GramHessian,
    pattern: &SparsityPattern,
    blocksize: usize,
) -> Result<SparseComponent> {
    let (n_in, n_out) = w.shape();
    if blocksize == 0 {
        return Err(Error::contract("OBS blocksize must be at least 1"));
    }
    if h.dim() != n_in {
        return Err(Error::contract(format!(
            "Hessian is {0}x{0}, weights have {n_in} rows",
            h.dim()
        )));
    }
    pattern.validate(n_in, n_out)?;
    if !w.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("weights to prune contain non-finite entries"));
    }
    if matches!(pattern, SparsityPattern::Dense) {
        return SparseComponent::from_mask(w, Mask::from_element(n_in, n_out, true));
    }

    let r = h.inverse_chol_upper();
    let blocksize = match *pattern {
        SparsityPattern::SemiStructured { m, .. } => blocksize.div_ceil(m) * m,
        _ => blocksize,
    };

    let mut w = w.clone();
    let mut mask = Mask::from_element(n_in, n_out, false);
    let mut kept_per_col = vec![0usize; n_out];
    let mut kept_total = 0usize;

    let mut i1 = 0;
    while i1 < n_in {
        let i2 = (i1 + blocksize).min(n_in);
        let count = i2 - i1;

        if let SparsityPattern::Unstructured { k, granularity } = *pattern {
            let saliency = |i: usize, j: usize| {
                let d = r[(i, i)];
                w[(i, j)] * w[(i, j)] / (d * d)
            };
            match granularity {
                Granularity::PerMatrix => {
                    let cands = (i1..n_in)
                        .flat_map(|i| (0..n_out).map(move |j| (i, j)))
                        .map(|(i, j)| (saliency(i, j), i * n_out + j));
                    for idx in top_k(cands, k - kept_total) {
                        let (i, j) = (idx / n_out, idx % n_out);
                        if i < i2 {
                            mask[(i, j)] = true;
                            kept_total += 1;
                        }
                    }
                }
                Granularity::PerColumn => {
                    for (j, kept) in kept_per_col.iter_mut().enumerate() {
                        let cands = (i1..n_in).map(|i| (saliency(i, j), i));
                        for i in top_k(cands, k - *kept) {
                            if i < i2 {
                                mask[(i, j)] = true;
                                *kept += 1;
                            }
                        }
                    }
                }
            }
        }

        let mut w1 = w.rows(i1, count).into_owned();
        let mut q1 = Matrix::zeros(count, n_out);
        let mut err1 = Matrix::zeros(count, n_out);

        for i in 0..count {
            let row = i1 + i;
            let d = r[(row, row)];

            if let SparsityPattern::SemiStructured { n, m } = *pattern {
                if row % m == 0 {
                    for j in 0..n_out {
                        let cands = (i..i + m).map(|ii| {
                            let dd = r[(i1 + ii, i1 + ii)];
                            (w1[(ii, j)] * w1[(ii, j)] / (dd * dd), i1 + ii)
                        });
                        for keep in top_k(cands, n) {
                            mask[(keep, j)] = true;
                        }
                    }
                }
            }

            let mut err = DVector::zeros(n_out);
            for j in 0..n_out {
                let wij = w1[(i, j)];
                let q = if mask[(row, j)] { wij } else { 0.0 };
                q1[(i, j)] = q;
                err[j] = (wij - q) / d;
            }
            for ii in i..count {
                let coeff = r[(row, i1 + ii)];
                if coeff != 0.0 {
                    let mut target = w1.row_mut(ii);
                    for j in 0..n_out {
                        target[j] -= coeff * err[j];
                    }
                }
            }
            err1.row_mut(i).copy_from(&err.transpose());
        }

        w.rows_mut(i1, count).copy_from(&q1);
        if i2 < n_in {
            let coupling = r.view((i1, i2), (count, n_in - i2));
            let mut rest = w.rows_mut(i2, n_in - i2);
            rest.gemm_tr(-1.0, &coupling, &err1, 1.0);
        }
        i1 = i2;
    }

    if !w.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("OBS sweep produced non-finite weights"));
    }
    SparseComponent::from_mask(&w, mask)
}
