//! Sequential U-processes: exact and Monte Carlo Hoeffding machinery, contraction
//! calculus, functional-CLT condition checks, Gaussian limit processes, random
//! geometric graph counts, two-sample changepoint statistics and diagonal-dominant
//! kernels, plus a config-driven harness.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments, clippy::type_complexity)]

pub mod combin;
pub mod error;
pub mod parallel;
pub mod tensor;

pub mod changepoint;
pub mod contractions;
pub mod diag_dominant;
pub mod fclt_conditions;
pub mod harness_cli;
pub mod limit_processes;
pub mod product_formula;
pub mod rgg;
pub mod sample_spaces;
pub mod ustat_core;

pub use error::{Error, Result};
