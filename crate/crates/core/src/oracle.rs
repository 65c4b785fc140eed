//! Brute-force references for small instances.
//!
//! Nothing here calls into the production solvers: objectives are summed
//! with explicit loops and linear systems are solved by plain Gaussian
//! elimination.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::types::{Granularity, LowRankFactors, Mask, Matrix, SparseComponent, SparsityPattern};

/// Largest `N_in` the exhaustive sparse oracle accepts.
pub const MAX_ORACLE_ROWS: usize = 8;
/// Largest side the random low-rank search accepts.
pub const MAX_SEARCH_DIM: usize = 16;

/// `sum_c sum_a sum_b D_ac H_ab D_bc`.
pub fn naive_objective(h: &Matrix, delta: &Matrix) -> f64 {
    let mut total = 0.0;
    for c in 0..delta.ncols() {
        for a in 0..delta.nrows() {
            for b in 0..delta.nrows() {
                total += delta[(a, c)] * h[(a, b)] * delta[(b, c)];
            }
        }
    }
    total
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut aug: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(row, &rhs)| {
            let mut r = row.clone();
            r.push(rhs);
            r
        })
        .collect();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs()))?;
        if aug[pivot][col].abs() <= 1e-14 * scale {
            return None;
        }
        aug.swap(col, pivot);
        for row in col + 1..n {
            let f = aug[row][col] / aug[col][col];
            for k in col..=n {
                aug[row][k] -= f * aug[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = aug[row][n];
        for k in row + 1..n {
            acc -= aug[row][k] * x[k];
        }
        x[row] = acc / aug[row][row];
    }
    Some(x)
}

/// Best weights on `support` for one column: `w_S = H_SS^-1 H_S,: w`.
/// Returns the full-length column and its objective.
pub fn restricted_column(h: &Matrix, w: &[f64], support: &[usize]) -> Result<(Vec<f64>, f64)> {
    let n = w.len();
    let mut col = vec![0.0; n];
    if !support.is_empty() {
        let a: Vec<Vec<f64>> = support
            .iter()
            .map(|&i| support.iter().map(|&j| h[(i, j)]).collect())
            .collect();
        let b: Vec<f64> = support
            .iter()
            .map(|&i| (0..n).map(|j| h[(i, j)] * w[j]).sum())
            .collect();
        let x = gauss_solve(&a, &b)
            .ok_or_else(|| Error::numeric("singular principal submatrix in oracle"))?;
        for (&i, xi) in support.iter().zip(x) {
            col[i] = xi;
        }
    }
    let delta: Vec<f64> = w.iter().zip(&col).map(|(a, b)| a - b).collect();
    let mut obj = 0.0;
    for a in 0..n {
        for b in 0..n {
            obj += delta[a] * h[(a, b)] * delta[b];
        }
    }
    Ok((col, obj))
}

fn bits(mask: u32, n: usize) -> Vec<usize> {
    (0..n).filter(|i| mask & (1 << i) != 0).collect()
}

/// Optimum of one column over supports accepted by `allowed`.
fn best_column(
    h: &Matrix,
    w: &[f64],
    allowed: impl Fn(&[usize]) -> bool,
) -> Result<(Vec<f64>, f64, usize)> {
    let n = w.len();
    let mut best: Option<(Vec<f64>, f64, usize)> = None;
    for m in 0..(1u32 << n) {
        let support = bits(m, n);
        if !allowed(&support) {
            continue;
        }
        let (col, obj) = restricted_column(h, w, &support)?;
        if best.as_ref().is_none_or(|b| obj < b.1) {
            best = Some((col, obj, support.len()));
        }
    }
    best.ok_or_else(|| Error::contract("no feasible support"))
}

/// Exhaustive optimum of `Tr((W - S)^T H (W - S))` over `S` in `pattern`.
///
/// Columns are independent for dense, per-column and N:M patterns. A
/// per-matrix budget is split across columns by dynamic programming over
/// per-column optima for every support size.
pub fn exhaustive_sparse_oracle(
    w: &Matrix,
    h: &Matrix,
    pattern: &SparsityPattern,
) -> Result<(f64, SparseComponent)> {
    let (n_in, n_out) = w.shape();
    if n_in > MAX_ORACLE_ROWS {
        return Err(Error::contract(format!(
            "exhaustive oracle refuses N_in = {n_in} (limit {MAX_ORACLE_ROWS})"
        )));
    }
    if h.shape() != (n_in, n_in) {
        return Err(Error::contract("oracle Hessian does not match weights"));
    }
    pattern.validate(n_in, n_out)?;
    let column = |j: usize| -> Vec<f64> { (0..n_in).map(|i| w[(i, j)]).collect() };

    let mut values = Matrix::zeros(n_in, n_out);
    let mut total = 0.0;
    match *pattern {
        SparsityPattern::Unstructured { k, granularity: Granularity::PerMatrix } => {
            // best[j][s]: optimum of column j with at most s nonzeros.
            let mut best: Vec<Vec<(Vec<f64>, f64)>> = Vec::with_capacity(n_out);
            for j in 0..n_out {
                let wj = column(j);
                let mut per_size = Vec::with_capacity(n_in + 1);
                for s in 0..=n_in {
                    let (col, obj, _) = best_column(h, &wj, |sup| sup.len() <= s)?;
                    per_size.push((col, obj));
                }
                best.push(per_size);
            }
            // dp[b]: best objective over the columns seen so far with budget b.
            let mut dp = vec![0.0f64; k + 1];
            let mut choice = vec![vec![0usize; k + 1]; n_out];
            for j in 0..n_out {
                let mut next = vec![f64::INFINITY; k + 1];
                for b in 0..=k {
                    for s in 0..=n_in.min(b) {
                        let cand = dp[b - s] + best[j][s].1;
                        if cand < next[b] {
                            next[b] = cand;
                            choice[j][b] = s;
                        }
                    }
                }
                dp = next;
            }
            total = dp[k];
            let mut b = k;
            for j in (0..n_out).rev() {
                let s = choice[j][b];
                for i in 0..n_in {
                    values[(i, j)] = best[j][s].0[i];
                }
                b -= s;
            }
        }
        _ => {
            for j in 0..n_out {
                let allowed = |sup: &[usize]| -> bool {
                    match *pattern {
                        SparsityPattern::Dense => sup.len() == n_in,
                        SparsityPattern::Unstructured { k, .. } => sup.len() <= k,
                        SparsityPattern::SemiStructured { n, m } => (0..n_in / m)
                            .all(|g| sup.iter().filter(|&&i| i / m == g).count() <= n),
                    }
                };
                let (col, obj, _) = best_column(h, &column(j), allowed)?;
                total += obj;
                for i in 0..n_in {
                    values[(i, j)] = col[i];
                }
            }
        }
    }
    let mask: Mask = values.map(|v| v != 0.0);
    Ok((total, SparseComponent::new(values, mask)?))
}

/// Minimum of `Tr((W - U V^T)^T H (W - U V^T))` over random rank-`r`
/// candidates. Returns `+inf` when `trials == 0`.
///
/// Without an anchor every candidate is Gaussian noise. With an anchor,
/// odd trials instead take a random gauge `(U G, V G^-T)` of the anchor and
/// add a small perturbation, probing its neighbourhood.
pub fn random_search_lowrank_oracle(
    w: &Matrix,
    h: &Matrix,
    r: usize,
    trials: usize,
    seed: u64,
    anchor: Option<&LowRankFactors>,
) -> Result<f64> {
    let (n_in, n_out) = w.shape();
    if n_in > MAX_SEARCH_DIM || n_out > MAX_SEARCH_DIM {
        return Err(Error::contract("random low-rank search is limited to 16x16"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |rows: usize, cols: usize, scale: f64| -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
    };
    let w_scale = (w.iter().map(|v| v * v).sum::<f64>() / (n_in * n_out) as f64).sqrt();
    let factor_scale = (w_scale / (r.max(1) as f64).sqrt()).sqrt().max(1e-3);

    let mut best = f64::INFINITY;
    for t in 0..trials {
        let (u, v) = match anchor {
            Some(a) if t % 2 == 1 && r > 0 => {
                let g = gauss(r, r, 1.0) + Matrix::identity(r, r) * 2.0;
                let Some(g_inv_t) = naive_inverse(&g).map(|m| m.transpose()) else {
                    continue;
                };
                let u = &a.u * &g;
                let v = &a.v * g_inv_t;
                let du = gauss(n_in, r, 1e-3 * (u.abs().max() + 1e-12));
                let dv = gauss(n_out, r, 1e-3 * (v.abs().max() + 1e-12));
                (u + du, v + dv)
            }
            _ => (gauss(n_in, r, factor_scale), gauss(n_out, r, factor_scale)),
        };
        let mut m = Matrix::zeros(n_in, n_out);
        for i in 0..n_in {
            for j in 0..n_out {
                m[(i, j)] = (0..r).map(|c| u[(i, c)] * v[(j, c)]).sum();
            }
        }
        best = best.min(naive_objective(h, &(w - m)));
    }
    Ok(best)
}

fn naive_inverse(g: &Matrix) -> Option<Matrix> {
    let n = g.nrows();
    let a: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| g[(i, j)]).collect()).collect();
    let mut inv = Matrix::zeros(n, n);
    for c in 0..n {
        let e: Vec<f64> = (0..n).map(|i| if i == c { 1.0 } else { 0.0 }).collect();
        let x = gauss_solve(&a, &e)?;
        for i in 0..n {
            inv[(i, c)] = x[i];
        }
    }
    Some(inv)
}

/// Central-difference gradient of `f` at `point`.
pub fn finite_difference_gradient(f: &dyn Fn(&Matrix) -> f64, point: &Matrix, epsilon: f64) -> Matrix {
    let mut grad = Matrix::zeros(point.nrows(), point.ncols());
    let mut probe = point.clone();
    for i in 0..point.nrows() {
        for j in 0..point.ncols() {
            let orig = probe[(i, j)];
            probe[(i, j)] = orig + epsilon;
            let up = f(&probe);
            probe[(i, j)] = orig - epsilon;
            let down = f(&probe);
            probe[(i, j)] = orig;
            grad[(i, j)] = (up - down) / (2.0 * epsilon);
        }
    }
    grad
}
