//! First-order optimizers for the factored low-rank step.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::types::Matrix;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Plain gradient descent, `p -= eta * g`.
    Gd,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "gd" => Ok(OptimizerKind::Gd),
            other => Err(Error::Parse(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Gd => "gd",
        })
    }
}

/// Adam moments for one parameter matrix.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Matrix,
    v: Matrix,
    step: u32,
}

impl AdamState {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self { m: Matrix::zeros(nrows, ncols), v: Matrix::zeros(nrows, ncols), step: 0 }
    }

    pub fn step_count(&self) -> u32 {
        self.step
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(state: &mut AdamState, param: &mut Matrix, grad: &Matrix, eta: f64) -> Result<()> {
    if param.shape() != grad.shape() || state.m.shape() != grad.shape() {
        return Err(Error::contract("Adam state, parameter and gradient shapes differ"));
    }
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::numeric("non-finite gradient passed to Adam"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, &g), (m, v)) in param
        .iter_mut()
        .zip(grad.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= eta * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
    }
    Ok(())
}
