//! `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! repeated keys are errors.

use std::collections::HashSet;
use std::path::Path;

use crate::altmin::{Activation, AltMinConfig, LowRankMode};
use crate::budget::{budget_for_rank_ratio, rank_for_fixed_compression};
use crate::error::{Error, Result};
use crate::gram::DampConvention;
use crate::optim::OptimizerKind;
use crate::pruners::PrunerKind;
use crate::types::{Granularity, SparsityPattern};

/// How the rank budget is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankSpec {
    Fixed(usize),
    /// Fill the budget left by an N:M pattern at compression ratio `rho`.
    Auto { rho: f64 },
    /// Split the budget at ratio `rho` between rank and unstructured nonzeros.
    Ratio { kappa: f64, rho: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub altmin: AltMinConfig,
    pub pattern: SparsityPattern,
    pub rank: RankSpec,
    pub activation: Activation,
    pattern_explicit: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            altmin: AltMinConfig::default(),
            pattern: SparsityPattern::n_m(2, 4),
            rank: RankSpec::Fixed(64),
            activation: Activation::Identity,
            pattern_explicit: false,
        }
    }
}

const KEYS: &[&str] = &[
    "pruner",
    "lowrank",
    "scaled",
    "t_am",
    "t_lr",
    "eta",
    "percdamp",
    "pattern",
    "rank",
    "seed",
    "damp_convention",
    "granularity",
    "blocksize",
    "optimizer",
    "activation",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Parse(format!("invalid value `{value}` for `{key}`")))
}

/// Parses `dense`, `k:<int>` or `<N>:<M>`.
pub fn parse_pattern(text: &str, granularity: Granularity) -> Result<SparsityPattern> {
    if text == "dense" {
        return Ok(SparsityPattern::Dense);
    }
    let (a, b) = text
        .split_once(':')
        .ok_or_else(|| Error::Parse(format!("invalid pattern `{text}`")))?;
    if a == "k" {
        let k = parse_num("pattern", b)?;
        return Ok(SparsityPattern::Unstructured { k, granularity });
    }
    Ok(SparsityPattern::SemiStructured { n: parse_num("pattern", a)?, m: parse_num("pattern", b)? })
}

pub fn parse_rank(text: &str) -> Result<RankSpec> {
    if let Some(rho) = text.strip_prefix("auto:") {
        return Ok(RankSpec::Auto { rho: parse_num("rank", rho)? });
    }
    if let Some(rest) = text.strip_prefix("ratio:") {
        let (kappa, rho) = rest
            .split_once(',')
            .ok_or_else(|| Error::Parse(format!("invalid rank `{text}`")))?;
        return Ok(RankSpec::Ratio {
            kappa: parse_num("rank", kappa.trim())?,
            rho: parse_num("rank", rho.trim())?,
        });
    }
    Ok(RankSpec::Fixed(parse_num("rank", text)?))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Parse(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        let mut pattern_text = None;
        let mut granularity = Granularity::PerMatrix;
        let mut blocksize = None;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Parse(format!("line {}: unknown key `{key}`", lineno + 1)));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            let a = &mut cfg.altmin;
            match key {
                "pruner" => a.pruner = value.parse()?,
                "lowrank" => a.lowrank_mode = value.parse::<LowRankMode>()?,
                "scaled" => a.is_scaled = parse_bool(key, value)?,
                "t_am" => a.t_am = parse_num(key, value)?,
                "t_lr" => a.t_lr = parse_num(key, value)?,
                "eta" => a.eta = parse_num(key, value)?,
                "percdamp" => a.percdamp = parse_num(key, value)?,
                "seed" => a.seed = parse_num(key, value)?,
                "damp_convention" => a.damp_convention = value.parse::<DampConvention>()?,
                "optimizer" => a.optimizer = value.parse::<OptimizerKind>()?,
                "blocksize" => blocksize = Some(parse_num::<usize>(key, value)?),
                "pattern" => pattern_text = Some(value.to_string()),
                "granularity" => {
                    granularity = match value {
                        "per-matrix" => Granularity::PerMatrix,
                        "per-column" => Granularity::PerColumn,
                        _ => return Err(Error::Parse(format!("invalid granularity `{value}`"))),
                    }
                }
                "rank" => cfg.rank = parse_rank(value)?,
                "activation" => cfg.activation = value.parse()?,
                _ => unreachable!("key list and match arms disagree"),
            }
        }

        if let Some(bs) = blocksize {
            match cfg.altmin.pruner {
                PrunerKind::Obs { .. } => cfg.altmin.pruner = PrunerKind::Obs { blocksize: bs },
                _ => return Err(Error::contract("`blocksize` only applies to the obs pruner")),
            }
        }
        if let Some(p) = pattern_text {
            cfg.pattern = parse_pattern(&p, granularity)?;
            cfg.pattern_explicit = true;
        }
        cfg.altmin.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Pattern and rank for an `n_in x n_out` layer.
    pub fn resolve(&self, n_in: usize, n_out: usize) -> Result<(SparsityPattern, usize)> {
        let (pattern, rank) = match self.rank {
            RankSpec::Fixed(r) => (self.pattern, r),
            RankSpec::Auto { rho } => match self.pattern {
                SparsityPattern::SemiStructured { n, m } => {
                    (self.pattern, rank_for_fixed_compression(rho, n, m, n_in, n_out)?)
                }
                other => {
                    return Err(Error::contract(format!(
                        "rank = auto needs an N:M pattern, got {other}"
                    )))
                }
            },
            RankSpec::Ratio { kappa, rho } => {
                if self.pattern_explicit {
                    return Err(Error::contract(
                        "rank = ratio derives the nonzero budget; drop the `pattern` key",
                    ));
                }
                let (r, k) = budget_for_rank_ratio(kappa, rho, n_in, n_out)?;
                (SparsityPattern::unstructured(k), r)
            }
        };
        pattern.validate(n_in, n_out)?;
        if rank > n_in.min(n_out) {
            return Err(Error::contract(format!(
                "rank {rank} exceeds min({n_in}, {n_out})"
            )));
        }
        Ok((pattern, rank))
    }
}
