//! Alternating minimization of the layer-wise reconstruction error over a
//! sparse component and a low-rank component, plus the layer-by-layer
//! pipeline that feeds each layer the outputs of the compressed layers
//! before it.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::gram::{build_gram, dampen, inversion_count, DampConvention, GramHessian};
use crate::lowrank::{diag_weighted_lowrank, lowrank_gd, lowrank_gd_scaled, truncated_svd};
use crate::optim::OptimizerKind;
use crate::pruners::{prune, PrunerKind};
use crate::types::{
    residual, trace_quadratic, CalibrationActivations, DecompositionResult, DenseWeights,
    HalfStep, LowRankFactors, Matrix, SparseComponent, SparsityPattern, TraceEntry,
};

/// Solver used for the low-rank half-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LowRankMode {
    /// Factored first-order solver on the full Hessian.
    #[default]
    FullHessianGd,
    /// Closed form under the diagonal of the Hessian.
    DiagClosedForm,
    /// Truncated SVD, ignoring the Hessian.
    DataFreeSvd,
}

impl FromStr for LowRankMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" => Ok(LowRankMode::FullHessianGd),
            "diag" => Ok(LowRankMode::DiagClosedForm),
            "svd" => Ok(LowRankMode::DataFreeSvd),
            other => Err(Error::Parse(format!("unknown low-rank mode `{other}`"))),
        }
    }
}

impl fmt::Display for LowRankMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LowRankMode::FullHessianGd => "gd",
            LowRankMode::DiagClosedForm => "diag",
            LowRankMode::DataFreeSvd => "svd",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AltMinConfig {
    pub t_am: usize,
    pub t_lr: usize,
    pub eta: f64,
    pub pruner: PrunerKind,
    pub lowrank_mode: LowRankMode,
    pub is_scaled: bool,
    pub optimizer: OptimizerKind,
    pub percdamp: f64,
    pub damp_convention: DampConvention,
    pub seed: u64,
}

impl Default for AltMinConfig {
    fn default() -> Self {
        Self {
            t_am: 80,
            t_lr: 50,
            eta: 1e-2,
            pruner: PrunerKind::default(),
            lowrank_mode: LowRankMode::FullHessianGd,
            is_scaled: true,
            optimizer: OptimizerKind::Adam,
            percdamp: 0.01,
            damp_convention: DampConvention::MeanDiag,
            seed: 0,
        }
    }
}

impl AltMinConfig {
    /// OBS pruning with the rescaled factored solver.
    pub fn full_hessian() -> Self {
        Self::default()
    }

    /// Wanda pruning with the diagonal closed-form low-rank step.
    pub fn oats() -> Self {
        Self {
            pruner: PrunerKind::Wanda,
            lowrank_mode: LowRankMode::DiagClosedForm,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_am == 0 {
            return Err(Error::contract("T_AM must be at least 1"));
        }
        if self.t_lr == 0 {
            return Err(Error::contract("T_LR must be at least 1"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::contract(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.percdamp > 0.0 && self.percdamp.is_finite()) {
            return Err(Error::contract(format!(
                "percdamp must be positive, got {}",
                self.percdamp
            )));
        }
        if let PrunerKind::Obs { blocksize: 0 } = self.pruner {
            return Err(Error::contract("OBS blocksize must be at least 1"));
        }
        Ok(())
    }
}

/// Learning rate for outer iteration `t`: `eta / (t + 10)`.
pub fn get_lr(t: usize, eta: f64) -> Result<f64> {
    if t == 0 {
        return Err(Error::contract("outer iterations are numbered from 1"));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::contract(format!("eta must be positive, got {eta}")));
    }
    Ok(eta / (t as f64 + 10.0))
}

fn entry(
    h: &GramHessian,
    w_hat: &Matrix,
    sparse: &SparseComponent,
    factors: &LowRankFactors,
    iter: usize,
    half_step: HalfStep,
) -> Result<TraceEntry> {
    let delta = residual(w_hat, sparse.values(), factors)?;
    Ok(TraceEntry {
        iter,
        half_step,
        objective_damped: trace_quadratic(h.damped(), &delta)?,
        objective_raw: trace_quadratic(h.raw(), &delta)?,
    })
}

/// Alternates a pruning step on `W_hat - U V^T` with a low-rank step on
/// `W_hat - W_S` for `cfg.t_am` iterations.
///
/// Starts from `W_S = 0`, `U = 0` and `V` drawn iid from `N(0, 1/r)` with
/// `cfg.seed`. The Hessian and its factorizations are taken as given and
/// never recomputed. Every half-step appends one trace entry.
pub fn alternating_decompose(
    h: &GramHessian,
    w_hat: &DenseWeights,
    pattern: &SparsityPattern,
    rank: usize,
    cfg: &AltMinConfig,
) -> Result<DecompositionResult> {
    alternating_decompose_observed(h, w_hat, pattern, rank, cfg, &mut |_, _, _| {})
}

/// [`alternating_decompose`] handing the iterate after every half-step to
/// `observer`.
pub fn alternating_decompose_observed(
    h: &GramHessian,
    w_hat: &DenseWeights,
    pattern: &SparsityPattern,
    rank: usize,
    cfg: &AltMinConfig,
    observer: &mut dyn FnMut(&TraceEntry, &SparseComponent, &LowRankFactors),
) -> Result<DecompositionResult> {
    cfg.validate()?;
    let (n_in, n_out) = (w_hat.n_in(), w_hat.n_out());
    if h.dim() != n_in {
        return Err(Error::contract(format!(
            "Hessian is {0}x{0} but weights have {n_in} inputs",
            h.dim()
        )));
    }
    pattern.validate(n_in, n_out)?;
    if rank > n_in.min(n_out) {
        return Err(Error::contract(format!(
            "rank {rank} exceeds min({n_in}, {n_out})"
        )));
    }
    let w = w_hat.matrix();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut factors = LowRankFactors::zeros(n_in, n_out, rank);
    if rank > 0 {
        let normal = Normal::new(0.0, 1.0 / (rank as f64).sqrt())
            .map_err(|e| Error::numeric(e.to_string()))?;
        factors.v = Matrix::from_fn(n_out, rank, |_, _| normal.sample(&mut rng));
    }
    let mut sparse = SparseComponent::zeros(n_in, n_out);
    let mut trace = Vec::with_capacity(2 * cfg.t_am);

    for t in 1..=cfg.t_am {
        let target = w - factors.product();
        sparse = prune(cfg.pruner, &target, h, pattern)?;
        let e = entry(h, w, &sparse, &factors, t, HalfStep::Sparse)?;
        observer(&e, &sparse, &factors);
        trace.push(e);

        if rank > 0 {
            let target = w - sparse.values();
            factors = match cfg.lowrank_mode {
                LowRankMode::FullHessianGd => {
                    let eta_t = get_lr(t, cfg.eta)?;
                    if cfg.is_scaled {
                        lowrank_gd_scaled(h, &target, &factors, cfg.t_lr, eta_t, cfg.optimizer)?
                    } else {
                        lowrank_gd(
                            h.damped(),
                            &target,
                            &factors.u,
                            &factors.v,
                            cfg.t_lr,
                            eta_t,
                            cfg.optimizer,
                        )?
                    }
                }
                LowRankMode::DiagClosedForm => diag_weighted_lowrank(&target, h.scaler(), rank)?,
                LowRankMode::DataFreeSvd => truncated_svd(&target, rank)?,
            };
        }
        let e = entry(h, w, &sparse, &factors, t, HalfStep::LowRank)?;
        observer(&e, &sparse, &factors);
        trace.push(e);
    }

    Ok(DecompositionResult {
        sparse,
        lowrank: factors,
        trace,
        config: cfg.clone(),
        pattern: *pattern,
    })
}

/// Wanda pruning alternated with the diagonal closed-form low-rank step.
pub fn oats_baseline(
    h: &GramHessian,
    w_hat: &DenseWeights,
    pattern: &SparsityPattern,
    rank: usize,
    t_am: usize,
) -> Result<DecompositionResult> {
    let cfg = AltMinConfig { t_am, ..AltMinConfig::oats() };
    alternating_decompose(h, w_hat, pattern, rank, &cfg)
}

/// Elementwise map applied to layer outputs between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Identity,
    /// `max(x, 0)`.
    Relu,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Parse(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
        })
    }
}

impl Activation {
    fn apply(self, m: Matrix) -> Matrix {
        match self {
            Activation::Identity => m,
            Activation::Relu => m.map(|v| v.max(0.0)),
        }
    }
}

/// Sparsity pattern and rank for one layer of a pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerPlan {
    pub pattern: SparsityPattern,
    pub rank: usize,
}

#[derive(Debug, Clone)]
pub struct LayerOutcome {
    pub result: DecompositionResult,
    /// Hessian built from the inputs this layer actually received.
    pub hessian: GramHessian,
    /// Hessian factorizations performed while compressing this layer.
    pub inversions: usize,
}

/// Compresses a chain of linear layers in order.
///
/// Layer `l` is decomposed against the Gram matrix of its inputs, which are
/// the outputs of the already compressed layers `0..l`.
pub fn sequential_decompose(
    layers: &[DenseWeights],
    x0: &CalibrationActivations,
    plans: &[LayerPlan],
    cfg: &AltMinConfig,
    activation: Activation,
) -> Result<Vec<LayerOutcome>> {
    if layers.len() != plans.len() {
        return Err(Error::contract(format!(
            "{} layers but {} layer plans",
            layers.len(),
            plans.len()
        )));
    }
    let mut width = x0.width();
    for (i, layer) in layers.iter().enumerate() {
        if layer.n_in() != width {
            return Err(Error::contract(format!(
                "layer {i} expects {} inputs but receives {width}",
                layer.n_in()
            )));
        }
        width = layer.n_out();
    }

    let mut x = x0.clone();
    let mut outcomes = Vec::with_capacity(layers.len());
    for (layer, plan) in layers.iter().zip(plans) {
        let before = inversion_count();
        let hessian = dampen(build_gram(&x)?, cfg.percdamp, cfg.damp_convention)?;
        let result = alternating_decompose(&hessian, layer, &plan.pattern, plan.rank, cfg)?;
        let inversions = inversion_count() - before;
        let next = activation.apply(x.matrix() * result.compressed());
        x = CalibrationActivations::new(next)?;
        outcomes.push(LayerOutcome { result, hessian, inversions });
    }
    Ok(outcomes)
}
