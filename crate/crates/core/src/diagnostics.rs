//! Order selection and residual whiteness checks in feature space.

use nalgebra::DMatrix;

use crate::dist::{chi2_sf, normal_quantile};
use crate::error::{KgcError, Result};
use crate::kernels::{estimate_lagged_kernels_with, kcf_matrices, KernelSpec, LaggedKernelSet};
use crate::kvar::{fit_from_kernels, FitOptions};
use crate::linalg::checked_inverse;
use crate::panel::TimeSeriesPanel;
use crate::scalar::Scalar;

/// Penalty flavor of the generalized information criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Criterion {
    /// `c = 2`.
    Aic,
    /// `c = ln(ln n_s)`.
    #[default]
    Hq,
}

impl Criterion {
    pub fn penalty_constant(self, n_s: usize) -> f64 {
        match self {
            Criterion::Aic => 2.0,
            Criterion::Hq => (n_s as f64).ln().ln(),
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Criterion::Aic => "aic",
            Criterion::Hq => "hq",
        })
    }
}

impl std::str::FromStr for Criterion {
    type Err = KgcError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aic" => Ok(Criterion::Aic),
            "hq" => Ok(Criterion::Hq),
            other => Err(KgcError::Parameter(format!("unknown criterion '{other}' (expected aic or hq)"))),
        }
    }
}

/// `ln det Σ + (c/n_s)·k·D²`; `None` when `Σ` is not positive definite.
pub fn information_criterion<T: Scalar>(sigma: &DMatrix<T>, k: usize, n_s: usize, flavor: Criterion) -> Option<f64> {
    let d = sigma.nrows();
    let chol = sigma.clone().cholesky()?;
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.as_f64().ln()).sum();
    log_det
        .is_finite()
        .then(|| log_det + flavor.penalty_constant(n_s) / n_s as f64 * (k * d * d) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderCandidate {
    pub order: usize,
    /// Criterion value; `None` when the order was excluded.
    pub value: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderScan {
    pub flavor: Criterion,
    pub sample_count: usize,
    pub candidates: Vec<OrderCandidate>,
    pub selected: usize,
}

/// Picks the admissible candidate with the smallest value; ties go to the
/// smaller order.
pub fn select_order(candidates: &[OrderCandidate]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for c in candidates {
        if let Some(v) = c.value {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((c.order, v));
            }
        }
    }
    best.map(|(k, _)| k).ok_or_else(|| {
        KgcError::NoAdmissibleOrder("every candidate order has a singular innovations covariance".into())
    })
}

/// Fits orders `1..=p_max` and evaluates the information criterion.
pub fn order_scan<T: Scalar>(
    panel: &TimeSeriesPanel<T>,
    spec: &KernelSpec<T>,
    p_max: usize,
    flavor: Criterion,
    opts: &FitOptions,
) -> Result<OrderScan> {
    let n = panel.len();
    let d = panel.dim();
    if p_max == 0 {
        return Err(KgcError::Parameter("maximum order must be at least 1".into()));
    }
    if p_max * d >= n {
        return Err(KgcError::Parameter(format!(
            "maximum order {p_max} with {d} channels needs more than {} samples, got {n}",
            p_max * d
        )));
    }
    let kset = estimate_lagged_kernels_with(panel, spec, p_max, opts.centering)?;
    kset.check_nondegenerate()?;
    order_scan_from_kernels(&kset, spec, p_max, flavor, opts)
}

pub fn order_scan_from_kernels<T: Scalar>(
    kset: &LaggedKernelSet<T>,
    spec: &KernelSpec<T>,
    p_max: usize,
    flavor: Criterion,
    opts: &FitOptions,
) -> Result<OrderScan> {
    let n = kset.sample_count();
    let candidates: Vec<OrderCandidate> = (1..=p_max)
        .map(|k| match fit_from_kernels(kset.clone(), *spec, k, 0, opts) {
            Ok(model) => match information_criterion(&model.sigma_w, k, n, flavor) {
                Some(v) => OrderCandidate { order: k, value: Some(v), note: None },
                None => OrderCandidate {
                    order: k,
                    value: None,
                    note: Some("innovations covariance not positive definite".into()),
                },
            },
            Err(e) => OrderCandidate { order: k, value: None, note: Some(e.to_string()) },
        })
        .collect();
    let selected = select_order(&candidates)?;
    Ok(OrderScan { flavor, sample_count: n, candidates, selected })
}

/// Residual kernel correlations `Σ̂(τ)_ij / sqrt(Σ̂(0)_ii · Σ̂(0)_jj)`.
pub fn residual_kcf<T: Scalar>(sigma_lags: &LaggedKernelSet<T>) -> Result<LaggedKernelSet<T>> {
    kcf_matrices(sigma_lags)
}

/// One residual correlation compared against the white-noise band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LagFlag {
    pub target: usize,
    pub source: usize,
    pub lag: isize,
    pub value: f64,
    pub exceeds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhitenessReport {
    pub alpha: f64,
    pub max_lag: usize,
    /// `z_{1−α/2} / √n_s`.
    pub threshold: f64,
    /// Every `(i, j, τ)` with `0 < |τ| ≤ L`.
    pub flags: Vec<LagFlag>,
    /// Portmanteau statistic.
    pub q: f64,
    pub dof: usize,
    pub p_value: f64,
}

impl WhitenessReport {
    pub fn exceed_count(&self) -> usize {
        self.flags.iter().filter(|f| f.exceeds).count()
    }

    /// Share of off-zero-lag values inside the band.
    pub fn fraction_inside(&self) -> f64 {
        if self.flags.is_empty() {
            return 1.0;
        }
        1.0 - self.exceed_count() as f64 / self.flags.len() as f64
    }

    pub fn rejects_whiteness(&self) -> bool {
        self.p_value < self.alpha
    }
}

/// Flags residual correlations outside `±z_{1−α/2}/√n_s` and computes
/// `Q = n_s Σ_{τ=1}^{L} tr(R(τ)ᵀ R(0)⁻¹ R(τ) R(0)⁻¹)` on `D²(L − p)`
/// degrees of freedom.
///
/// `Q` is unchanged by the diagonal normalization, so the correlations
/// can be passed in place of the raw residual moments.
pub fn whiteness_test<T: Scalar>(
    kcf_r: &LaggedKernelSet<T>,
    n_s: usize,
    alpha: f64,
    max_lag: usize,
    fitted_order: usize,
) -> Result<WhitenessReport> {
    if max_lag == 0 {
        return Err(KgcError::Parameter("whiteness test needs at least one lag".into()));
    }
    if max_lag <= fitted_order {
        return Err(KgcError::Parameter(format!(
            "portmanteau degrees of freedom need lag depth {max_lag} above model order {fitted_order}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(KgcError::Parameter(format!("significance level must be in (0, 1), got {alpha}")));
    }
    kcf_r.require_lag(max_lag, "whiteness test")?;
    let d = kcf_r.dim();
    let threshold = normal_quantile(1.0 - alpha / 2.0)? / (n_s as f64).sqrt();

    let mut flags = Vec::with_capacity(2 * max_lag * d * d);
    for tau in (-(max_lag as isize)..=max_lag as isize).filter(|&t| t != 0) {
        let m = kcf_r.at(tau);
        for i in 0..d {
            for j in 0..d {
                let value = m[(i, j)].as_f64();
                flags.push(LagFlag { target: i, source: j, lag: tau, value, exceeds: value.abs() > threshold });
            }
        }
    }

    let r0_inv = checked_inverse(kcf_r.at(0), "zero-lag residual correlation", 1e14)?;
    let mut q = T::zero();
    for tau in 1..=max_lag as isize {
        let r = kcf_r.at(tau);
        q += (r.transpose() * &r0_inv * r * &r0_inv).trace();
    }
    let q = (T::from_usize_lossy(n_s) * q).as_f64().max(0.0);
    let dof = d * d * (max_lag - fitted_order);
    let p_value = chi2_sf(q, dof as f64)?;
    Ok(WhitenessReport { alpha, max_lag, threshold, flags, q, dof, p_value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::estimate_lagged_kernels;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn set(nonneg: Vec<DMatrix<f64>>, n: usize) -> LaggedKernelSet<f64> {
        let d = nonneg[0].nrows();
        LaggedKernelSet::from_nonnegative(nonneg, n, (0..d).map(|i| format!("x{i}")).collect()).unwrap()
    }

    #[test]
    fn identity_sigma_criterion_values() {
        let sigma = DMatrix::<f64>::identity(2, 2);
        let v2 = information_criterion(&sigma, 2, 512, Criterion::Hq).unwrap();
        // 2 · 4 · ln(ln 512) / 512
        assert!((v2 - 0.028605).abs() < 1e-6, "{v2}");
        let candidates: Vec<OrderCandidate> = (1..=4)
            .map(|k| OrderCandidate { order: k, value: information_criterion(&sigma, k, 512, Criterion::Hq), note: None })
            .collect();
        assert_eq!(select_order(&candidates).unwrap(), 1);
    }

    #[test]
    fn flavors_differ_by_penalty_gap() {
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        for n in [16usize, 100, 1618, 5000] {
            for k in 1..5 {
                let aic = information_criterion(&sigma, k, n, Criterion::Aic).unwrap();
                let hq = information_criterion(&sigma, k, n, Criterion::Hq).unwrap();
                let gap = (2.0 - (n as f64).ln().ln()) * (k * 4) as f64 / n as f64;
                assert!((aic - hq - gap).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn penalty_strictly_increases_with_order() {
        let sigma = DMatrix::from_row_slice(1, 1, &[0.4]);
        let vals: Vec<f64> = (1..6).map(|k| information_criterion(&sigma, k, 300, Criterion::Aic).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn ties_and_exclusions() {
        let c = |order, value| OrderCandidate { order, value, note: None };
        assert_eq!(select_order(&[c(1, Some(0.5)), c(2, Some(0.5))]).unwrap(), 1);
        assert_eq!(select_order(&[c(1, None), c(2, Some(0.7)), c(3, Some(0.2))]).unwrap(), 3);
        assert!(select_order(&[c(1, None)]).is_err());
        assert!(information_criterion(&DMatrix::<f64>::zeros(2, 2), 1, 100, Criterion::Hq).is_none());
    }

    #[test]
    fn residual_kcf_normalizes() {
        let s0 = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 9.0]);
        let s1 = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.0]);
        let r = residual_kcf(&set(vec![s0, s1], 100)).unwrap();
        assert_eq!(r.at(0)[(0, 0)], 1.0);
        assert_eq!(r.at(0)[(1, 1)], 1.0);
        assert!((r.at(0)[(0, 1)] - 1.0 / 6.0).abs() < 1e-15);
        assert!(r.at(1).iter().all(|&v| v == 0.0));
        let bad = DMatrix::from_row_slice(1, 1, &[0.0]);
        assert!(residual_kcf(&set(vec![bad.clone(), bad], 10)).is_err());
    }

    #[test]
    fn perfectly_white_report() {
        let lags: Vec<DMatrix<f64>> =
            std::iter::once(DMatrix::identity(2, 2)).chain((0..5).map(|_| DMatrix::zeros(2, 2))).collect();
        let rep = whiteness_test(&set(lags, 256), 256, 0.01, 5, 1).unwrap();
        assert_eq!(rep.exceed_count(), 0);
        assert_eq!(rep.q, 0.0);
        assert_eq!(rep.p_value, 1.0);
        assert_eq!(rep.dof, 16);
        assert_eq!(rep.flags.len(), 2 * 5 * 4);
    }

    #[test]
    fn lag_depth_must_exceed_order() {
        let lags = vec![DMatrix::identity(1, 1), DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)];
        let s = set(lags, 50);
        assert!(whiteness_test(&s, 50, 0.05, 2, 2).is_err());
        assert!(whiteness_test(&s, 50, 0.05, 0, 0).is_err());
        assert!(whiteness_test(&s, 50, 0.05, 2, 1).is_ok());
    }

    #[test]
    fn white_noise_rejection_rate_matches_level() {
        // Gaussian white noise, no model: per-lag flags and the portmanteau
        // statistic should reject at roughly the nominal rate.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (trials, n, lags, alpha) = (1000usize, 400usize, 5usize, 0.05);
        let mut rejections = 0usize;
        let (mut flagged, mut total) = (0usize, 0usize);
        for _ in 0..trials {
            let data: Vec<Vec<f64>> = (0..2).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect();
            let panel = TimeSeriesPanel::from_channels(data).unwrap();
            let ks = estimate_lagged_kernels(&panel, &KernelSpec::linear(), lags).unwrap();
            let rep = whiteness_test(&residual_kcf(&ks).unwrap(), n, alpha, lags, 0).unwrap();
            rejections += rep.rejects_whiteness() as usize;
            flagged += rep.exceed_count();
            total += rep.flags.len();
        }
        let rate = rejections as f64 / trials as f64;
        let se = (alpha * (1.0 - alpha) / trials as f64).sqrt();
        assert!((rate - alpha).abs() <= 2.0 * se + 0.01, "portmanteau rejection rate {rate}");
        let flag_rate = flagged as f64 / total as f64;
        assert!((flag_rate - alpha).abs() < 0.01, "flag rate {flag_rate}");
    }

    proptest! {
        #[test]
        fn flags_are_exactly_the_threshold_exceedances(
            vals in proptest::collection::vec(-0.3f64..0.3, 12),
            n in 50usize..2000,
        ) {
            let mut nonneg = vec![DMatrix::identity(2, 2)];
            for t in 0..3 {
                nonneg.push(DMatrix::from_row_slice(2, 2, &vals[4 * t..4 * t + 4]));
            }
            let s = set(nonneg, n);
            let rep = whiteness_test(&s, n, 0.01, 3, 1).unwrap();
            let thr = 2.5758293035489004 / (n as f64).sqrt();
            prop_assert!((rep.threshold - thr).abs() < 1e-9);
            for f in &rep.flags {
                prop_assert_eq!(f.exceeds, s.at(f.lag)[(f.target, f.source)].abs() > rep.threshold);
            }
            prop_assert!(rep.q >= 0.0);
        }
    }
}
