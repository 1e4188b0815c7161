//! Command-line front end and Monte Carlo engine for kernelized Granger
//! causality.

// Negated float comparisons are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod error;
pub mod io;
pub mod montecarlo;
pub mod pipeline;
pub mod settings;

pub use error::{CliError, CliResult};
