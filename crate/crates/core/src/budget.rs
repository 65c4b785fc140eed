//! Rank and nonzero budgets for a target compression ratio.
//!
//! `rho` is the fraction of dense parameters removed. A sparse plus
//! low-rank layer stores its nonzeros plus `r * (N_in + N_out)` factor
//! entries.

use crate::error::{Error, Result};
use crate::types::{Granularity, SparsityPattern};

/// Slack below zero still read as a zero budget. `1 - rho - N/M` lands a
/// few ulps under zero for boundary inputs such as `rho = 0.7, N/M = 0.3`.
const BOUNDARY_SLACK: f64 = 1e-12;

fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::contract(format!("compression ratio must lie in [0, 1), got {rho}")));
    }
    Ok(())
}

fn check_dims(n_in: usize, n_out: usize) -> Result<()> {
    if n_in == 0 || n_out == 0 {
        return Err(Error::contract("layer dimensions must be at least 1"));
    }
    Ok(())
}

/// Rank that fills the budget left by an `N:M` sparse component:
/// `floor((1 - rho - N/M) * N_out N_in / (N_out + N_in))`.
pub fn rank_for_fixed_compression(
    rho: f64,
    n: usize,
    m: usize,
    n_in: usize,
    n_out: usize,
) -> Result<usize> {
    check_rho(rho)?;
    check_dims(n_in, n_out)?;
    if n == 0 || n > m {
        return Err(Error::contract(format!("invalid N:M pattern {n}:{m}")));
    }
    let share = 1.0 - rho - n as f64 / m as f64;
    let share = if share < 0.0 && share > -BOUNDARY_SLACK { 0.0 } else { share };
    if share < 0.0 {
        return Err(Error::contract(format!(
            "compression ratio {rho} leaves no room for a {n}:{m} sparse component"
        )));
    }
    let (fi, fo) = (n_in as f64, n_out as f64);
    Ok((share * (fo * fi) / (fo + fi)).floor() as usize)
}

/// Splits the retained budget between low rank (`kappa`) and unstructured
/// nonzeros (`1 - kappa`). Returns `(r, k)`.
pub fn budget_for_rank_ratio(
    kappa: f64,
    rho: f64,
    n_in: usize,
    n_out: usize,
) -> Result<(usize, usize)> {
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::contract(format!("rank ratio must lie in [0, 1], got {kappa}")));
    }
    check_rho(rho)?;
    check_dims(n_in, n_out)?;
    let (fi, fo) = (n_in as f64, n_out as f64);
    let r = (kappa * (1.0 - rho) * fo * fi / (fo + fi)).floor() as usize;
    let k = ((1.0 - kappa) * (1.0 - rho) * fo * fi).floor() as usize;
    Ok((r, k))
}

/// Stored parameter count of a sparse plus rank-`r` layer.
///
/// An `N:M` component counts `N/M` of the dense entries, rounded down.
pub fn effective_params(pattern: &SparsityPattern, r: usize, n_in: usize, n_out: usize) -> u64 {
    let dense = n_in as u64 * n_out as u64;
    let sparse = match *pattern {
        SparsityPattern::Dense => dense,
        SparsityPattern::Unstructured { k, granularity: Granularity::PerMatrix } => k as u64,
        SparsityPattern::Unstructured { k, granularity: Granularity::PerColumn } => {
            k as u64 * n_out as u64
        }
        SparsityPattern::SemiStructured { n, m } => dense * n as u64 / m as u64,
    };
    sparse + r as u64 * (n_in as u64 + n_out as u64)
}

/// True when a layer stores at most `(1 - rho) N_in N_out` parameters.
pub fn within_compression(
    pattern: &SparsityPattern,
    r: usize,
    n_in: usize,
    n_out: usize,
    rho: f64,
) -> bool {
    let allowed = (1.0 - rho) * n_in as f64 * n_out as f64;
    // Relative slack absorbs the rounding of `allowed` itself.
    effective_params(pattern, r, n_in, n_out) as f64 <= allowed * (1.0 + 1e-12)
}
