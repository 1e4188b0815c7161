//! Feature-space vector autoregression fitted through kernelized
//! Yule–Walker equations.
//!
//! With `K(τ)[i][j] = E⟨φ(x_i(s)) | φ(x_j(s+τ))⟩`, multiplying the model
//! `φ(x(n)) = Σ_k A_k φ(x(n−k)) + w(n)` by `φ(x(n−m))ᵀ` and taking
//! expectations gives, for `m = 1..p`,
//!
//! ```text
//! K(−m) = Σ_k A_k K(k − m)
//! [K(−1) … K(−p)] = [A_1 … A_p] · 𝒦_p(0),    𝒦_p(0) block (r, c) = K(r − c)
//! ```
//!
//! Index table for `p = 2` (blocks of `𝒦_2(0)` and `Γ`):
//!
//! ```text
//!            c = 1     c = 2
//! r = 1      K(0)      K(−1)
//! r = 2      K(1)      K(0)
//! ```

use nalgebra::{DMatrix, DVector};

use crate::error::{KgcError, Result};
use crate::kernels::{estimate_lagged_kernels_with, Centering, KernelSpec, LaggedKernelSet};
use crate::linalg::{
    condition_number, equilibration, least_squares, min_eigenvalue, scale_symmetric, symmetrize, total_least_squares,
};
use crate::panel::TimeSeriesPanel;
use crate::scalar::Scalar;

/// Default cap on the Gram matrix condition number.
pub const DEFAULT_CONDITION_CAP: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Solver {
    Ls,
    #[default]
    Tls,
}

impl std::fmt::Display for Solver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Solver::Ls => "ls",
            Solver::Tls => "tls",
        })
    }
}

impl std::str::FromStr for Solver {
    type Err = KgcError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ls" => Ok(Solver::Ls),
            "tls" => Ok(Solver::Tls),
            other => Err(KgcError::Parameter(format!("unknown solver '{other}' (expected ls or tls)"))),
        }
    }
}

/// Which expression is used for the lagged residual moments `Σ̂(τ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualLagForm {
    /// Full second moment of `w(n) = φ(x(n)) − Σ_k A_k φ(x(n−k))`:
    /// `K(τ) − Σ_l K(τ−l)A_lᵀ − Σ_k A_k K(τ+k) + Σ_k Σ_l A_k K(τ+k−l) A_lᵀ`.
    #[default]
    Exact,
    /// Only the quadratic term: `K(τ) − Σ_k Σ_l A_k K(τ+k−l) A_lᵀ`.
    /// Coincides with `Exact` at `τ = 0` for a Yule–Walker solution.
    QuadraticOnly,
}

/// Coefficient blocks `A_1 … A_p`, each `D × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarCoefficients<T: Scalar> {
    blocks: Vec<DMatrix<T>>,
}

impl<T: Scalar> VarCoefficients<T> {
    pub fn new(blocks: Vec<DMatrix<T>>) -> Result<Self> {
        let Some(first) = blocks.first() else {
            return Err(KgcError::Parameter("model order must be at least 1".into()));
        };
        let d = first.nrows();
        if blocks.iter().any(|b| b.nrows() != d || b.ncols() != d) {
            return Err(KgcError::Parameter("coefficient blocks must be square and equal-sized".into()));
        }
        Ok(Self { blocks })
    }

    pub fn zeros(dim: usize, order: usize) -> Self {
        Self { blocks: vec![DMatrix::zeros(dim, dim); order] }
    }

    /// Splits a `D × pD` matrix `[A_1 … A_p]`.
    pub fn from_concatenated(m: &DMatrix<T>) -> Result<Self> {
        let d = m.nrows();
        if d == 0 || !m.ncols().is_multiple_of(d) {
            return Err(KgcError::Parameter("concatenated coefficients must be D × pD".into()));
        }
        Self::new((0..m.ncols() / d).map(|k| m.columns(k * d, d).into_owned()).collect())
    }

    pub fn order(&self) -> usize {
        self.blocks.len()
    }

    pub fn dim(&self) -> usize {
        self.blocks[0].nrows()
    }

    /// `A_k` for `k = 1..=p`.
    pub fn lag(&self, k: usize) -> &DMatrix<T> {
        &self.blocks[k - 1]
    }

    pub fn blocks(&self) -> &[DMatrix<T>] {
        &self.blocks
    }

    /// `[A_1 … A_p]`, `D × pD`.
    pub fn concatenated(&self) -> DMatrix<T> {
        let d = self.dim();
        let mut m = DMatrix::zeros(d, d * self.order());
        for (k, b) in self.blocks.iter().enumerate() {
            m.columns_mut(k * d, d).copy_from(b);
        }
        m
    }

    /// `a_ij(k)` with 1-based lag and 0-based channels.
    pub fn coefficient(&self, target: usize, source: usize, lag: usize) -> T {
        self.blocks[lag - 1][(target, source)]
    }
}

/// Moment equations `[A_1 … A_p] · gram = [K(−1) … K(−p)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct YuleWalkerSystem<T: Scalar> {
    order: usize,
    dim: usize,
    /// `[K(−1); …; K(−p)]`, `pD × D`.
    pub lhs_blocks: DMatrix<T>,
    /// `𝒦_p(0)`, `pD × pD`, block `(r, c) = K(r − c)`.
    pub gram: DMatrix<T>,
}

impl<T: Scalar> YuleWalkerSystem<T> {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `[K(−1) … K(−p)]`, the lagged blocks laid side by side (`D × pD`).
    pub fn rhs(&self) -> DMatrix<T> {
        let d = self.dim;
        let mut m = DMatrix::zeros(d, d * self.order);
        for k in 0..self.order {
            m.columns_mut(k * d, d).copy_from(&self.lhs_blocks.rows(k * d, d));
        }
        m
    }
}

/// Block-Toeplitz matrix with block `(r, c) = K(sign · (r − c))`, `r, c ∈ 1..=p`.
fn block_toeplitz<T: Scalar>(kset: &LaggedKernelSet<T>, p: usize, sign: isize) -> DMatrix<T> {
    let d = kset.dim();
    let mut g = DMatrix::zeros(p * d, p * d);
    for r in 0..p {
        for c in 0..p {
            let tau = sign * (r as isize - c as isize);
            g.view_mut((r * d, c * d), (d, d)).copy_from(kset.at(tau));
        }
    }
    g
}

pub fn assemble_yw<T: Scalar>(kset: &LaggedKernelSet<T>, p: usize) -> Result<YuleWalkerSystem<T>> {
    if p == 0 {
        return Err(KgcError::Parameter("model order must be at least 1".into()));
    }
    kset.require_lag(p, "Yule-Walker assembly")?;
    let d = kset.dim();
    let mut lhs = DMatrix::zeros(p * d, d);
    for r in 1..=p {
        lhs.rows_mut((r - 1) * d, d).copy_from(kset.at(-(r as isize)));
    }
    Ok(YuleWalkerSystem { order: p, dim: d, lhs_blocks: lhs, gram: block_toeplitz(kset, p, 1) })
}

/// The system rescaled to unit-diagonal moments: with `s = 1/√diag(𝒦_p(0))`
/// and `u = 1/√diag(K(0))`, `Ã = diag(u) 𝒜 diag(s)⁻¹` solves
/// `Ã · diag(s) 𝒦 diag(s) = diag(u) R diag(s)`. Both solvers are
/// equivariant under this rescaling; it only improves the arithmetic.
struct Equilibrated<T: Scalar> {
    gram: DMatrix<T>,
    rhs: DMatrix<T>,
    s: DVector<T>,
    u: DVector<T>,
}

impl<T: Scalar> Equilibrated<T> {
    fn new(sys: &YuleWalkerSystem<T>, cap: f64) -> Result<Self> {
        let s = equilibration(&sys.gram);
        let u = s.rows(0, sys.dim).into_owned();
        let gram = scale_symmetric(&sys.gram, &s);
        let condition = condition_number(&gram);
        if !(condition <= cap) {
            return Err(KgcError::IllConditioned { condition, cap });
        }
        let rhs = sys.rhs();
        let rhs = DMatrix::from_fn(rhs.nrows(), rhs.ncols(), |i, j| u[i] * rhs[(i, j)] * s[j]);
        Ok(Self { gram, rhs, s, u })
    }

    fn unscale(&self, x: &DMatrix<T>) -> Result<VarCoefficients<T>> {
        let a = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * self.s[j] / self.u[i]);
        VarCoefficients::from_concatenated(&a)
    }
}

/// Least-squares solution of `𝒜 · 𝒦_p(0) = [K(−1) … K(−p)]`.
///
/// `condition_cap` bounds the condition number of the equilibrated gram.
pub fn solve_ls<T: Scalar>(sys: &YuleWalkerSystem<T>, condition_cap: f64) -> Result<VarCoefficients<T>> {
    let eq = Equilibrated::new(sys, condition_cap)?;
    let x = least_squares(&eq.gram.transpose(), &eq.rhs.transpose())?;
    eq.unscale(&x.transpose())
}

/// Total-least-squares solution of the same system, treating the moment
/// matrices on both sides as noisy.
pub fn solve_tls<T: Scalar>(sys: &YuleWalkerSystem<T>, condition_cap: f64) -> Result<VarCoefficients<T>> {
    let eq = Equilibrated::new(sys, condition_cap)?;
    let x = total_least_squares(&eq.gram.transpose(), &eq.rhs.transpose())?;
    eq.unscale(&x.transpose())
}

/// Innovations covariance with an attached consistency warning.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCovariance<T: Scalar> {
    pub sigma: DMatrix<T>,
    /// Set when the smallest eigenvalue is below `−1e−6·‖Σ‖`.
    pub warning: Option<String>,
}

/// `Σ = K(0) − Σ_k Σ_l A_k K(k − l) A_lᵀ`, symmetrized.
pub fn residual_covariance<T: Scalar>(
    kset: &LaggedKernelSet<T>,
    coeffs: &VarCoefficients<T>,
) -> Result<ResidualCovariance<T>> {
    let p = coeffs.order();
    check_dims(kset, coeffs)?;
    kset.require_lag(p.saturating_sub(1), "residual covariance")?;
    let mut sigma = kset.at(0).clone();
    for k in 1..=p {
        for l in 1..=p {
            sigma -= coeffs.lag(k) * kset.at(k as isize - l as isize) * coeffs.lag(l).transpose();
        }
    }
    let sigma = symmetrize(&sigma);
    let norm = sigma.norm();
    let min_eig = min_eigenvalue(&sigma);
    let warning = (min_eig < -T::lit(1e-6) * norm).then(|| {
        format!("innovations covariance has eigenvalue {min_eig} (norm {norm}); model is inconsistent with the kernel moments")
    });
    Ok(ResidualCovariance { sigma, warning })
}

fn check_dims<T: Scalar>(kset: &LaggedKernelSet<T>, coeffs: &VarCoefficients<T>) -> Result<()> {
    if kset.dim() != coeffs.dim() {
        return Err(KgcError::Parameter(format!(
            "coefficients are {}-dimensional, kernel moments {}-dimensional",
            coeffs.dim(),
            kset.dim()
        )));
    }
    Ok(())
}

/// Lagged residual moments `Σ̂(τ)` for `τ ∈ [−max_lag, max_lag]`, returned as
/// a lagged set so that normalization helpers apply unchanged.
pub fn residual_kernel_lags<T: Scalar>(
    kset: &LaggedKernelSet<T>,
    coeffs: &VarCoefficients<T>,
    max_lag: usize,
    form: ResidualLagForm,
) -> Result<LaggedKernelSet<T>> {
    check_dims(kset, coeffs)?;
    let p = coeffs.order();
    let needed = match form {
        ResidualLagForm::Exact => max_lag + p,
        ResidualLagForm::QuadraticOnly => max_lag + p - 1,
    };
    kset.require_lag(needed, "residual kernel lags")?;

    let k = |t: isize| kset.at(t);
    let mut out = Vec::with_capacity(max_lag + 1);
    for tau in 0..=max_lag as isize {
        let mut s = k(tau).clone();
        let mut quad = DMatrix::zeros(s.nrows(), s.ncols());
        for a in 1..=p {
            for b in 1..=p {
                quad += coeffs.lag(a) * k(tau + a as isize - b as isize) * coeffs.lag(b).transpose();
            }
        }
        match form {
            ResidualLagForm::QuadraticOnly => s -= quad,
            ResidualLagForm::Exact => {
                for a in 1..=p {
                    let ai = a as isize;
                    s -= k(tau - ai) * coeffs.lag(a).transpose();
                    s -= coeffs.lag(a) * k(tau + ai);
                }
                s += quad;
            }
        }
        out.push(s);
    }
    // The lag-0 moment is symmetric in exact arithmetic; remove rounding skew.
    out[0] = symmetrize(&out[0]);
    LaggedKernelSet::from_nonnegative(out, kset.sample_count(), kset.names().to_vec())
}

/// `Γ`, the `pD × pD` second-moment matrix of the stacked regressors
/// `[φ(x(n−1)); …; φ(x(n−p))]`: block `(r, c) = K(r − c)`.
pub fn build_gamma<T: Scalar>(kset: &LaggedKernelSet<T>, p: usize) -> Result<DMatrix<T>> {
    if p == 0 {
        return Err(KgcError::Parameter("model order must be at least 1".into()));
    }
    kset.require_lag(p - 1, "Gamma assembly")?;
    Ok(block_toeplitz(kset, p, 1))
}

/// `‖[I −𝒜] · 𝒦_{p+1}(0) − [Σ 0 … 0]‖_F`, zero at an exact Yule–Walker solution.
pub fn yule_walker_residual<T: Scalar>(
    kset: &LaggedKernelSet<T>,
    coeffs: &VarCoefficients<T>,
    sigma: &DMatrix<T>,
) -> Result<T> {
    let p = coeffs.order();
    let d = coeffs.dim();
    kset.require_lag(p, "Yule-Walker residual")?;
    let big = block_toeplitz(kset, p + 1, 1);
    let mut lhs = DMatrix::zeros(d, d * (p + 1));
    lhs.columns_mut(0, d).fill_with_identity();
    lhs.columns_mut(d, d * p).copy_from(&(-coeffs.concatenated()));
    let mut diff = lhs * big;
    let mut head = diff.columns_mut(0, d);
    head -= sigma;
    Ok(diff.norm())
}

/// Options for [`fit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub solver: Solver,
    pub centering: Centering,
    pub condition_cap: f64,
    /// Lag depth kept for residual diagnostics; `None` selects
    /// `min(20, ⌊n_s/8⌋)`.
    pub diagnostic_lag: Option<usize>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            solver: Solver::Tls,
            centering: Centering::None,
            condition_cap: DEFAULT_CONDITION_CAP,
            diagnostic_lag: None,
        }
    }
}

/// `min(20, ⌊n_s/8⌋)`.
pub fn default_diagnostic_lag(n_s: usize) -> usize {
    (n_s / 8).min(20)
}

/// A fitted feature-space VAR.
#[derive(Debug, Clone)]
pub struct KvarModel<T: Scalar> {
    pub order: usize,
    pub coeffs: VarCoefficients<T>,
    /// Innovations covariance `Σ`.
    pub sigma_w: DMatrix<T>,
    pub gamma: DMatrix<T>,
    pub kernel: KernelSpec<T>,
    pub sample_count: usize,
    /// Solver that produced `coeffs` (LS when TLS fell back).
    pub solver: Solver,
    pub centering: Centering,
    /// Kernel moments used for the fit, up to `order + diagnostic_lag`.
    pub kernels: LaggedKernelSet<T>,
    pub diagnostic_lag: usize,
    /// Complete-form Yule–Walker residual; reported, never used to reject.
    pub yw_residual: T,
    pub warnings: Vec<String>,
}

impl<T: Scalar> KvarModel<T> {
    pub fn dim(&self) -> usize {
        self.coeffs.dim()
    }

    pub fn names(&self) -> &[String] {
        self.kernels.names()
    }

    /// `Σ̂(τ)` for `τ ∈ [−L, L]` at the model's diagnostic depth.
    pub fn residual_lags(&self, form: ResidualLagForm) -> Result<LaggedKernelSet<T>> {
        residual_kernel_lags(&self.kernels, &self.coeffs, self.diagnostic_lag, form)
    }
}

/// Estimates kernel moments and solves for a `p`-th order model.
pub fn fit<T: Scalar>(
    panel: &TimeSeriesPanel<T>,
    spec: &KernelSpec<T>,
    p: usize,
    opts: &FitOptions,
) -> Result<KvarModel<T>> {
    let n = panel.len();
    let d = panel.dim();
    if p == 0 {
        return Err(KgcError::Parameter("model order must be at least 1".into()));
    }
    if n <= p * d {
        return Err(KgcError::Parameter(format!(
            "series length {n} too short for order {p} with {d} channels"
        )));
    }
    let wanted_diag = opts.diagnostic_lag.unwrap_or_else(|| default_diagnostic_lag(n));
    // Keep every estimated lag below n_s.
    let diagnostic_lag = wanted_diag.min(n.saturating_sub(p + 1));
    let kset = estimate_lagged_kernels_with(panel, spec, p + diagnostic_lag, opts.centering)?;
    fit_from_kernels(kset, *spec, p, diagnostic_lag, opts)
}

/// Solves for a `p`-th order model from already estimated moments.
pub fn fit_from_kernels<T: Scalar>(
    kset: LaggedKernelSet<T>,
    kernel: KernelSpec<T>,
    p: usize,
    diagnostic_lag: usize,
    opts: &FitOptions,
) -> Result<KvarModel<T>> {
    kset.check_nondegenerate()?;
    let sys = assemble_yw(&kset, p)?;
    let mut warnings = Vec::new();
    let (coeffs, solver) = match opts.solver {
        Solver::Ls => (solve_ls(&sys, opts.condition_cap)?, Solver::Ls),
        Solver::Tls => match solve_tls(&sys, opts.condition_cap) {
            Ok(c) => (c, Solver::Tls),
            Err(KgcError::NonUniqueSolution(why)) => {
                warnings.push(format!("TLS solution not unique ({why}); fell back to least squares"));
                (solve_ls(&sys, opts.condition_cap)?, Solver::Ls)
            }
            Err(e) => return Err(e),
        },
    };
    let cov = residual_covariance(&kset, &coeffs)?;
    warnings.extend(cov.warning);
    let gamma = build_gamma(&kset, p)?;
    let yw_residual = yule_walker_residual(&kset, &coeffs, &cov.sigma)?;
    Ok(KvarModel {
        order: p,
        coeffs,
        sigma_w: cov.sigma,
        gamma,
        kernel,
        sample_count: kset.sample_count(),
        solver,
        centering: opts.centering,
        diagnostic_lag: diagnostic_lag.min(kset.max_lag().saturating_sub(p)),
        kernels: kset,
        yw_residual,
        warnings,
    })
}
