//! File formats, run configuration and the command implementations behind
//! the `splr` binary.

pub mod config;
pub mod hslf;

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::altmin::{alternating_decompose, sequential_decompose, LayerPlan};
use crate::budget::{budget_for_rank_ratio, effective_params, rank_for_fixed_compression};
use crate::error::{Error, Result};
use crate::gram::{dampen, inversion_count, reset_inversion_count, DampConvention, GRAM_BLOCK_ROWS};
use crate::oracle::exhaustive_sparse_oracle;
use crate::types::{
    numeric_rank, residual, trace_quadratic, CalibrationActivations, DecompositionResult,
    DenseWeights, Granularity, LowRankFactors, SparsityPattern,
};

pub use config::{parse_pattern, RankSpec, RunConfig};
pub use hslf::{read_matrix, stream_gram, write_matrix, Dtype};

fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Final figures of one decomposition, as written to `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub n_in: usize,
    pub n_out: usize,
    pub pattern: SparsityPattern,
    pub rank: usize,
    pub lambda: f64,
    pub objective_damped: f64,
    pub objective_raw: f64,
    pub mask_feasible: bool,
    pub rank_feasible: bool,
    pub effective_params: u64,
    pub hessian_inversions: usize,
}

const SUMMARY_HEADER: [&str; 11] = [
    "n_in",
    "n_out",
    "pattern",
    "rank",
    "lambda",
    "objective_damped",
    "objective_raw",
    "mask_feasible",
    "rank_feasible",
    "effective_params",
    "hessian_inversions",
];

impl Summary {
    fn record(&self) -> Vec<String> {
        vec![
            self.n_in.to_string(),
            self.n_out.to_string(),
            self.pattern.to_string(),
            self.rank.to_string(),
            fmt_f64(self.lambda),
            fmt_f64(self.objective_damped),
            fmt_f64(self.objective_raw),
            self.mask_feasible.to_string(),
            self.rank_feasible.to_string(),
            self.effective_params.to_string(),
            self.hessian_inversions.to_string(),
        ]
    }
}

fn summarize(
    result: &DecompositionResult,
    w: &DenseWeights,
    h: &crate::gram::GramHessian,
    inversions: usize,
) -> Result<Summary> {
    let delta = residual(w.matrix(), result.sparse.values(), &result.lowrank)?;
    let rank = result.lowrank.rank();
    Ok(Summary {
        n_in: w.n_in(),
        n_out: w.n_out(),
        pattern: result.pattern,
        rank,
        lambda: h.lambda(),
        objective_damped: trace_quadratic(h.damped(), &delta)?,
        objective_raw: trace_quadratic(h.raw(), &delta)?,
        mask_feasible: result.pattern.is_feasible(result.sparse.mask()),
        rank_feasible: numeric_rank(&result.lowrank.product()) <= rank,
        effective_params: effective_params(&result.pattern, rank, w.n_in(), w.n_out()),
        hessian_inversions: inversions,
    })
}

fn write_artifacts(prefix: &Path, result: &DecompositionResult, summary: &Summary) -> Result<()> {
    write_matrix(&with_suffix(prefix, ".sparse.hslf"), result.sparse.values(), Dtype::F64)?;
    write_matrix(&with_suffix(prefix, ".u.hslf"), &result.lowrank.u, Dtype::F64)?;
    write_matrix(&with_suffix(prefix, ".v.hslf"), &result.lowrank.v, Dtype::F64)?;

    let mut trace = csv::Writer::from_path(with_suffix(prefix, ".trace.csv"))?;
    trace.write_record(["iter", "half_step", "objective_damped", "objective_raw"])?;
    for e in &result.trace {
        trace.write_record([
            e.iter.to_string(),
            e.half_step.label().to_string(),
            fmt_f64(e.objective_damped),
            fmt_f64(e.objective_raw),
        ])?;
    }
    trace.flush()?;

    let mut out = csv::Writer::from_path(with_suffix(prefix, ".summary.csv"))?;
    out.write_record(SUMMARY_HEADER)?;
    out.write_record(summary.record())?;
    out.flush()?;
    Ok(())
}

/// `splr decompose`: one layer from files to artifacts.
pub fn run_decompose(
    weights: &Path,
    activations: &Path,
    config: &Path,
    out_prefix: &Path,
) -> Result<Summary> {
    let cfg = RunConfig::load(config)?;
    let w = DenseWeights::new(read_matrix(weights)?)?;
    let (gram, _) = stream_gram(activations, GRAM_BLOCK_ROWS)?;
    if gram.nrows() != w.n_in() {
        return Err(Error::contract(format!(
            "activations have {} columns, weights have {} rows",
            gram.nrows(),
            w.n_in()
        )));
    }
    let (pattern, rank) = cfg.resolve(w.n_in(), w.n_out())?;

    reset_inversion_count();
    let h = dampen(gram, cfg.altmin.percdamp, cfg.altmin.damp_convention)?;
    let result = alternating_decompose(&h, &w, &pattern, rank, &cfg.altmin)?;
    let summary = summarize(&result, &w, &h, inversion_count())?;
    write_artifacts(out_prefix, &result, &summary)?;
    Ok(summary)
}

/// `splr budget`: writes `rank,nonzeros,effective_params` CSV to `out`.
pub fn run_budget(
    pattern: &str,
    rho: Option<f64>,
    kappa: Option<f64>,
    n_in: usize,
    n_out: usize,
    out: &mut dyn Write,
) -> Result<()> {
    let rho = rho.ok_or_else(|| Error::contract("--rho is required"))?;
    let pattern = match pattern {
        "k" => SparsityPattern::unstructured(0),
        other => parse_pattern(other, Granularity::PerMatrix)?,
    };
    let (pattern, rank) = match (kappa, pattern) {
        (Some(kappa), SparsityPattern::Unstructured { .. }) => {
            let (r, k) = budget_for_rank_ratio(kappa, rho, n_in, n_out)?;
            (SparsityPattern::unstructured(k), r)
        }
        (Some(_), other) => {
            return Err(Error::contract(format!(
                "--kappa splits an unstructured budget; pattern {other} is not `k`"
            )))
        }
        (None, SparsityPattern::SemiStructured { n, m }) => {
            (pattern, rank_for_fixed_compression(rho, n, m, n_in, n_out)?)
        }
        (None, other) => {
            return Err(Error::contract(format!(
                "--rho alone needs an N:M pattern, got {other}"
            )))
        }
    };
    let nonzeros = pattern.capacity(n_in, n_out);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rank", "nonzeros", "effective_params"])?;
    w.write_record([
        rank.to_string(),
        nonzeros.to_string(),
        effective_params(&pattern, rank, n_in, n_out).to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

/// Evaluation report for stored components.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub objective_raw: f64,
    pub objective_damped: f64,
    pub nnz: usize,
    pub pattern: SparsityPattern,
    pub mask_feasible: bool,
    pub numeric_rank: usize,
}

/// `splr eval`: scores stored components against a layer.
///
/// Damping and the pattern checked come from `config` when given; otherwise
/// mean-diagonal damping at 0.01 and the 2:4 pattern are used.
pub fn run_eval(
    weights: &Path,
    activations: &Path,
    sparse: &Path,
    u: &Path,
    v: &Path,
    config: Option<&Path>,
    out: &mut dyn Write,
) -> Result<EvalReport> {
    let w = DenseWeights::new(read_matrix(weights)?)?;
    let s = read_matrix(sparse)?;
    let factors = LowRankFactors::new(read_matrix(u)?, read_matrix(v)?)?;
    let (gram, _) = stream_gram(activations, GRAM_BLOCK_ROWS)?;
    if gram.nrows() != w.n_in() {
        return Err(Error::contract("activations do not match weights"));
    }
    let (percdamp, convention, pattern) = match config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            let (pattern, _) = cfg.resolve(w.n_in(), w.n_out())?;
            (cfg.altmin.percdamp, cfg.altmin.damp_convention, pattern)
        }
        None => (0.01, DampConvention::MeanDiag, SparsityPattern::n_m(2, 4)),
    };
    let h = dampen(gram, percdamp, convention)?;
    let delta = residual(w.matrix(), &s, &factors)?;
    let mask = s.map(|x| x != 0.0);
    let report = EvalReport {
        objective_raw: trace_quadratic(h.raw(), &delta)?,
        objective_damped: trace_quadratic(h.damped(), &delta)?,
        nnz: mask.iter().filter(|&&b| b).count(),
        pattern,
        mask_feasible: pattern.is_feasible(&mask),
        numeric_rank: numeric_rank(&factors.product()),
    };
    let mut csv = csv::Writer::from_writer(out);
    csv.write_record([
        "objective_raw",
        "objective_damped",
        "nnz",
        "pattern",
        "mask_feasible",
        "numeric_rank",
    ])?;
    csv.write_record([
        fmt_f64(report.objective_raw),
        fmt_f64(report.objective_damped),
        report.nnz.to_string(),
        report.pattern.to_string(),
        report.mask_feasible.to_string(),
        report.numeric_rank.to_string(),
    ])?;
    csv.flush()?;
    Ok(report)
}

/// `splr pipeline`: compresses a chain of layers in order.
///
/// Writes `layer<i>.*` artifacts and `pipeline.csv` into `out_dir`.
pub fn run_pipeline(
    layers: &[PathBuf],
    activations: &Path,
    config: &Path,
    out_dir: &Path,
) -> Result<Vec<Summary>> {
    let cfg = RunConfig::load(config)?;
    let weights = layers
        .iter()
        .map(|p| DenseWeights::new(read_matrix(p)?))
        .collect::<Result<Vec<_>>>()?;
    let x0 = CalibrationActivations::new(read_matrix(activations)?)?;
    let plans = weights
        .iter()
        .map(|w| {
            cfg.resolve(w.n_in(), w.n_out())
                .map(|(pattern, rank)| LayerPlan { pattern, rank })
        })
        .collect::<Result<Vec<_>>>()?;

    std::fs::create_dir_all(out_dir)?;
    let outcomes = sequential_decompose(&weights, &x0, &plans, &cfg.altmin, cfg.activation)?;

    let mut table = csv::Writer::from_path(out_dir.join("pipeline.csv"))?;
    let mut header = vec!["layer"];
    header.extend(SUMMARY_HEADER);
    table.write_record(&header)?;
    let mut summaries = Vec::with_capacity(outcomes.len());
    for (i, (outcome, w)) in outcomes.iter().zip(&weights).enumerate() {
        let summary = summarize(&outcome.result, w, &outcome.hessian, outcome.inversions)?;
        write_artifacts(&out_dir.join(format!("layer{i}")), &outcome.result, &summary)?;
        let mut record = vec![i.to_string()];
        record.extend(summary.record());
        table.write_record(&record)?;
        summaries.push(summary);
    }
    table.flush()?;
    Ok(summaries)
}

/// Hidden `splr oracle`: exhaustive optimum of the sparse step for a tiny
/// layer, `objective` as a one-line CSV.
pub fn run_oracle(
    weights: &Path,
    activations: &Path,
    pattern: &str,
    granularity: Granularity,
    percdamp: f64,
    out: &mut dyn Write,
) -> Result<f64> {
    let w = read_matrix(weights)?;
    let (gram, _) = stream_gram(activations, GRAM_BLOCK_ROWS)?;
    let h = dampen(gram, percdamp, DampConvention::MeanDiag)?;
    let pattern = parse_pattern(pattern, granularity)?;
    let (obj, _) = exhaustive_sparse_oracle(&w, h.damped(), &pattern)?;
    writeln!(out, "objective\n{}", fmt_f64(obj))?;
    Ok(obj)
}
