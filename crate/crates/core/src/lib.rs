//! Sparse plus low-rank decomposition of layer weights.
//!
//! Given dense weights `W` (`N_in x N_out`) and calibration inputs `X`, find
//! a sparse `W_S` in a sparsity pattern and a rank-`r` matrix `M = U V^T`
//! minimizing the layer-wise reconstruction error
//! `||X W - X (W_S + M)||_F^2 = Tr(D^T H D)` with `H = X^T X` and
//! `D = W - W_S - M`.
//!
//! The solver alternates a pruning step for `W_S` ([`pruners`]) with a
//! low-rank step for `M` ([`lowrank`]); [`altmin`] drives the loop and the
//! layer-by-layer pipeline. [`gram`] builds and factorizes the Hessian once
//! per layer, [`budget`] sizes ranks for a target compression ratio, and
//! [`oracle`] holds brute-force references for small instances.
//!
//! ```no_run
//! use splr::{altmin, gram, types::*};
//!
//! # fn run(x: Matrix, w: Matrix) -> splr::Result<()> {
//! let x = CalibrationActivations::new(x)?;
//! let w = DenseWeights::new(w)?;
//! let h = gram::dampen(gram::build_gram(&x)?, 0.01, gram::DampConvention::MeanDiag)?;
//! let cfg = altmin::AltMinConfig::full_hessian();
//! let res = altmin::alternating_decompose(&h, &w, &SparsityPattern::n_m(2, 4), 8, &cfg)?;
//! println!("final error {:?}", res.final_objective());
//! # Ok(())
//! # }
//! ```

pub mod altmin;
pub mod budget;
pub mod cli_io;
pub mod error;
pub mod gram;
pub mod lowrank;
pub mod optim;
pub mod oracle;
pub mod pruners;
pub mod types;

pub use error::{Error, Result};
