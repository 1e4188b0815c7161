//! Nonlinear Granger causality through linear autoregression in a
//! reproducing-kernel feature space.
//!
//! Kernel moments `K(τ)` replace second-order moments throughout: the
//! Yule–Walker equations, the innovations covariance, residual whiteness
//! checks, order selection and the Wald test all run on kernel averages,
//! never on explicit feature vectors.
//!
//! Everything numeric is generic over [`Scalar`] (`f32`, `f64`); the `*64`
//! aliases below fix the common `f64` case.

// Negated float comparisons are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod dist;
pub mod error;
pub mod inference;
pub mod kernels;
pub mod kvar;
pub mod linalg;
pub mod panel;
pub mod scalar;
pub mod simulate;

pub use diagnostics::{order_scan, residual_kcf, whiteness_test, Criterion, OrderScan, WhitenessReport};
pub use error::{KgcError, Result};
pub use inference::{
    filliben_coefficient, gc_contrast, gc_test, gc_test_all_pairs, vec_coeffs, wald_statistic, ContrastMatrix,
    GcTestResult,
};
pub use kernels::{estimate_lagged_kernels, kcf, Centering, KernelSpec, LaggedKernelSet, MercerKernel};
pub use kvar::{fit, FitOptions, KvarModel, ResidualLagForm, Solver, VarCoefficients, YuleWalkerSystem};
pub use panel::TimeSeriesPanel;
pub use scalar::Scalar;
pub use simulate::{builtin_system, builtin_systems, simulate, SimulationConfig, SystemSpec};

pub type Panel64 = TimeSeriesPanel<f64>;
pub type Panel32 = TimeSeriesPanel<f32>;
pub type KernelSpec64 = KernelSpec<f64>;
pub type KernelSpec32 = KernelSpec<f32>;
pub type LaggedKernelSet64 = LaggedKernelSet<f64>;
pub type LaggedKernelSet32 = LaggedKernelSet<f32>;
pub type KvarModel64 = KvarModel<f64>;
pub type KvarModel32 = KvarModel<f32>;
