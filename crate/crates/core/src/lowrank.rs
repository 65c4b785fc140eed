//! Solvers for the low-rank half-step: minimize `Tr((W - M)^T H (W - M))`
//! over `rank(M) <= r`.
//!
//! Three Hessian regimes are covered. For `H = I` the truncated SVD is
//! exact. For diagonal `H = D^2` the minimizer is `D^-1 C_r(D W)`. For a
//! full Hessian the problem is reparametrized as `M = U V^T` and solved with
//! a first-order method, optionally after the change of variables
//! `U' = D U` which gives the Hessian a unit diagonal.

use nalgebra::{DVector, SVD};

use crate::error::{Error, Result};
use crate::gram::GramHessian;
use crate::optim::{adam_step, AdamState, OptimizerKind};
use crate::types::{trace_quadratic, LowRankFactors, Matrix};

const SVD_MAX_ITERS: usize = 10_000;

fn check_rank(r: usize, shape: (usize, usize)) -> Result<()> {
    let cap = shape.0.min(shape.1);
    if r > cap {
        Err(Error::contract(format!(
            "rank budget {r} exceeds min dimension {cap} of a {}x{} matrix",
            shape.0, shape.1
        )))
    } else {
        Ok(())
    }
}

/// Best rank-`r` approximation `C_r(W)` with singular values folded into `U`.
///
/// Singular triplets are ordered by decreasing singular value (stable on
/// ties) and each right singular vector is signed so its first nonzero
/// entry is positive.
pub fn truncated_svd(w: &Matrix, r: usize) -> Result<LowRankFactors> {
    let (n_in, n_out) = w.shape();
    check_rank(r, (n_in, n_out))?;
    if !w.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("cannot take the SVD of a non-finite matrix"));
    }
    if r == 0 {
        return Ok(LowRankFactors::zeros(n_in, n_out, 0));
    }
    let svd = SVD::try_new(w.clone(), true, true, f64::EPSILON, SVD_MAX_ITERS)
        .ok_or_else(|| Error::numeric("SVD did not converge"))?;
    let (Some(left), Some(right_t)) = (svd.u.as_ref(), svd.v_t.as_ref()) else {
        return Err(Error::numeric("SVD did not return singular vectors"));
    };
    let sigma = &svd.singular_values;
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));

    let mut u = Matrix::zeros(n_in, r);
    let mut v = Matrix::zeros(n_out, r);
    for (c, &idx) in order.iter().take(r).enumerate() {
        let right = right_t.row(idx);
        let sign = match right.iter().find(|&&x| x != 0.0) {
            Some(&x) if x < 0.0 => -1.0,
            _ => 1.0,
        };
        for j in 0..n_out {
            v[(j, c)] = sign * right[j];
        }
        for i in 0..n_in {
            u[(i, c)] = sign * sigma[idx] * left[(i, idx)];
        }
    }
    Ok(LowRankFactors { u, v })
}

fn check_scaler(d: &DVector<f64>, rows: usize) -> Result<()> {
    if d.len() != rows {
        return Err(Error::contract(format!(
            "scaler has length {}, matrix has {rows} rows",
            d.len()
        )));
    }
    if d.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::contract("diagonal scaler must be strictly positive"));
    }
    Ok(())
}

fn scale_rows(m: &Matrix, d: &DVector<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| d[i] * m[(i, j)])
}

fn unscale_rows(m: &Matrix, d: &DVector<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] / d[i])
}

/// Exact minimizer under a diagonal Hessian: `U V^T = D^-1 C_r(D W)`.
pub fn diag_weighted_lowrank(w: &Matrix, d: &DVector<f64>, r: usize) -> Result<LowRankFactors> {
    check_scaler(d, w.nrows())?;
    let scaled = truncated_svd(&scale_rows(w, d), r)?;
    Ok(LowRankFactors { u: unscale_rows(&scaled.u, d), v: scaled.v })
}

/// `Tr((W - U V^T)^T H (W - U V^T))`.
pub fn factored_objective(h: &Matrix, w: &Matrix, u: &Matrix, v: &Matrix) -> Result<f64> {
    let mut resid = w.clone();
    resid.gemm(-1.0, u, &v.transpose(), 1.0);
    trace_quadratic(h, &resid)
}

/// Objective and the product `H R` at a point, `R = W - U V^T`.
fn evaluate(h: &Matrix, w: &Matrix, u: &Matrix, v: &Matrix) -> (f64, Matrix) {
    let mut resid = w.clone();
    resid.gemm(-1.0, u, &v.transpose(), 1.0);
    let hr = h * &resid;
    (resid.dot(&hr), hr)
}

/// Analytic gradients `(-2 H R V, -2 R^T H U)`.
pub fn factored_gradients(h: &Matrix, w: &Matrix, u: &Matrix, v: &Matrix) -> (Matrix, Matrix) {
    let (_, hr) = evaluate(h, w, u, v);
    (&hr * v * -2.0, hr.tr_mul(u) * -2.0)
}

/// One point visited by the factored solver.
#[derive(Debug)]
pub struct GdIterate<'a> {
    /// 0 for the initial point, then the step index.
    pub step: usize,
    pub u: &'a Matrix,
    pub v: &'a Matrix,
    pub objective: f64,
}

fn check_gd_args(h: &Matrix, w: &Matrix, u: &Matrix, v: &Matrix, t_lr: usize, eta: f64) -> Result<()> {
    let (n_in, n_out) = w.shape();
    if h.shape() != (n_in, n_in) {
        return Err(Error::contract("Hessian does not match target rows"));
    }
    if u.nrows() != n_in || v.nrows() != n_out || u.ncols() != v.ncols() {
        return Err(Error::contract(format!(
            "factor shapes U {}x{}, V {}x{} do not fit a {n_in}x{n_out} target",
            u.nrows(),
            u.ncols(),
            v.nrows(),
            v.ncols()
        )));
    }
    if t_lr == 0 {
        return Err(Error::contract("T_LR must be at least 1"));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::contract(format!("learning rate must be positive, got {eta}")));
    }
    Ok(())
}

/// Runs `t_lr` optimizer steps on `(U, V)` jointly and returns the iterate
/// with the lowest objective seen, the starting point included.
///
/// Optimizer moments start from zero on every call.
pub fn lowrank_gd(
    h: &Matrix,
    w: &Matrix,
    u_init: &Matrix,
    v_init: &Matrix,
    t_lr: usize,
    eta: f64,
    optimizer: OptimizerKind,
) -> Result<LowRankFactors> {
    lowrank_gd_observed(h, w, u_init, v_init, t_lr, eta, optimizer, &mut |_| {})
}

/// [`lowrank_gd`] reporting every visited iterate to `observer`.
#[allow(clippy::too_many_arguments)]
pub fn lowrank_gd_observed(
    h: &Matrix,
    w: &Matrix,
    u_init: &Matrix,
    v_init: &Matrix,
    t_lr: usize,
    eta: f64,
    optimizer: OptimizerKind,
    observer: &mut dyn FnMut(&GdIterate<'_>),
) -> Result<LowRankFactors> {
    check_gd_args(h, w, u_init, v_init, t_lr, eta)?;
    let mut u = u_init.clone();
    let mut v = v_init.clone();
    let (mut objective, mut hr) = evaluate(h, w, &u, &v);
    if !objective.is_finite() {
        return Err(Error::numeric("initial low-rank objective is not finite"));
    }
    observer(&GdIterate { step: 0, u: &u, v: &v, objective });
    if u.ncols() == 0 {
        return Ok(LowRankFactors { u, v });
    }

    let mut best = (objective, u.clone(), v.clone());
    let mut state_u = AdamState::new(u.nrows(), u.ncols());
    let mut state_v = AdamState::new(v.nrows(), v.ncols());

    for step in 1..=t_lr {
        let grad_u = &hr * &v * -2.0;
        let grad_v = hr.tr_mul(&u) * -2.0;
        if !grad_u.iter().chain(grad_v.iter()).all(|g| g.is_finite()) {
            return Err(Error::numeric(format!("non-finite gradient at low-rank step {step}")));
        }
        match optimizer {
            OptimizerKind::Adam => {
                adam_step(&mut state_u, &mut u, &grad_u, eta)?;
                adam_step(&mut state_v, &mut v, &grad_v, eta)?;
            }
            OptimizerKind::Gd => {
                u.zip_apply(&grad_u, |p, g| *p -= eta * g);
                v.zip_apply(&grad_v, |p, g| *p -= eta * g);
            }
        }
        (objective, hr) = evaluate(h, w, &u, &v);
        if !objective.is_finite() {
            return Err(Error::numeric(format!("non-finite objective at low-rank step {step}")));
        }
        observer(&GdIterate { step, u: &u, v: &v, objective });
        if objective < best.0 {
            best = (objective, u.clone(), v.clone());
        }
    }
    Ok(LowRankFactors { u: best.1, v: best.2 })
}

/// Factored solver in diagonally rescaled coordinates.
///
/// Optimizes `U' = D U` against `D^-1 H D^-1` and target `D W`, then maps
/// back with `U = D^-1 U'`. Both problems share the same objective value
/// at corresponding points.
pub fn lowrank_gd_scaled(
    h: &GramHessian,
    w: &Matrix,
    prev: &LowRankFactors,
    t_lr: usize,
    eta: f64,
    optimizer: OptimizerKind,
) -> Result<LowRankFactors> {
    lowrank_gd_scaled_observed(h, w, prev, t_lr, eta, optimizer, &mut |_| {})
}

/// [`lowrank_gd_scaled`] reporting iterates in scaled coordinates.
pub fn lowrank_gd_scaled_observed(
    h: &GramHessian,
    w: &Matrix,
    prev: &LowRankFactors,
    t_lr: usize,
    eta: f64,
    optimizer: OptimizerKind,
    observer: &mut dyn FnMut(&GdIterate<'_>),
) -> Result<LowRankFactors> {
    let d = h.scaler();
    check_scaler(d, w.nrows())?;
    if prev.u.nrows() != w.nrows() {
        return Err(Error::contract("warm-start U does not match target rows"));
    }
    let target = scale_rows(w, d);
    let u0 = scale_rows(&prev.u, d);
    let scaled = lowrank_gd_observed(h.scaled(), &target, &u0, &prev.v, t_lr, eta, optimizer, observer)?;
    Ok(LowRankFactors { u: unscale_rows(&scaled.u, d), v: scaled.v })
}
