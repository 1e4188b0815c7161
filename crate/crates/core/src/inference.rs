//! Wald tests of feature-space coefficient nullity.
//!
//! With `a = vec([A_1 … A_p])` (column stacking) the estimator satisfies
//! `√n_s (â − a) → N(0, Γ⁻¹ ⊗ Σ)`, so for a contrast `C`
//!
//! ```text
//! λ_W = n_s · âᵀ Cᵀ [C (Γ⁻¹ ⊗ Σ) Cᵀ]⁻¹ C â  →  χ²_rank(C)
//! ```
//!
//! The factor `n_s` is explicit here; `Γ` and `Σ` are the fitted model's
//! sample estimates.

use nalgebra::{DMatrix, DVector};

use crate::dist::{chi2_sf, normal_quantile};
use crate::error::{KgcError, Result};
use crate::kvar::{KvarModel, VarCoefficients};
use crate::linalg::checked_inverse;
use crate::scalar::Scalar;

/// Condition cap for the matrices inverted by the Wald statistic.
const WALD_CONDITION_CAP: f64 = 1e14;

/// `vec([A_1 … A_p])`: `a[k·D² + c·D + r] = A_{k+1}[r, c]`.
pub fn vec_coeffs<T: Scalar>(coeffs: &VarCoefficients<T>) -> DVector<T> {
    let m = coeffs.concatenated();
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_coeffs`].
pub fn unvec_coeffs<T: Scalar>(a: &DVector<T>, dim: usize) -> Result<VarCoefficients<T>> {
    if dim == 0 || !a.len().is_multiple_of(dim * dim) || a.is_empty() {
        return Err(KgcError::Parameter(format!("vector of length {} is not pD² for D = {dim}", a.len())));
    }
    let m = DMatrix::from_column_slice(dim, a.len() / dim, a.as_slice());
    VarCoefficients::from_concatenated(&m)
}

/// Position of `a_ij(k)` inside `vec([A_1 … A_p])` (0-based channels, 1-based lag).
pub fn coefficient_index(dim: usize, target: usize, source: usize, lag: usize) -> usize {
    (lag - 1) * dim * dim + source * dim + target
}

/// Restriction matrix `C` of a null hypothesis `C a = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastMatrix<T: Scalar> {
    rows: DMatrix<T>,
}

impl<T: Scalar> ContrastMatrix<T> {
    /// Checks full row rank.
    pub fn new(rows: DMatrix<T>) -> Result<Self> {
        if rows.nrows() == 0 || rows.nrows() > rows.ncols() {
            return Err(KgcError::Parameter(format!(
                "contrast must have between 1 and {} rows, got {}",
                rows.ncols(),
                rows.nrows()
            )));
        }
        let svd = rows.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let tol = smax * T::lit(1e-12);
        if svd.rank(tol) < rows.nrows() || smax <= T::zero() {
            return Err(KgcError::RankDeficient("contrast matrix rows are linearly dependent".into()));
        }
        Ok(Self { rows })
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.rows
    }

    /// Number of restrictions `ν`.
    pub fn rank(&self) -> usize {
        self.rows.nrows()
    }

    /// Multiplies each row by the matching entry of `scale`.
    pub fn row_scaled(&self, scale: &[T]) -> Result<Self> {
        if scale.len() != self.rows.nrows() {
            return Err(KgcError::Parameter("one scale factor per contrast row is required".into()));
        }
        let mut rows = self.rows.clone();
        for (mut r, &s) in rows.row_iter_mut().zip(scale) {
            r *= s;
        }
        Self::new(rows)
    }
}

/// Selection contrast for "source does not cause target": one row per lag
/// picking `a_{target,source}(k)`. Channels are 0-based.
pub fn gc_contrast<T: Scalar>(dim: usize, order: usize, target: usize, source: usize) -> Result<ContrastMatrix<T>> {
    if target >= dim || source >= dim {
        return Err(KgcError::Parameter(format!("channel index out of range for D = {dim}")));
    }
    if target == source {
        return Err(KgcError::Parameter("a channel cannot be tested for causing itself".into()));
    }
    if order == 0 {
        return Err(KgcError::Parameter("model order must be at least 1".into()));
    }
    let mut rows = DMatrix::zeros(order, order * dim * dim);
    for k in 1..=order {
        rows[(k - 1, coefficient_index(dim, target, source, k))] = T::one();
    }
    ContrastMatrix::new(rows)
}

/// Statistic, degrees of freedom and p-value of one Wald test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaldOutcome {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// `n_s · (Câ)ᵀ [C V Cᵀ]⁻¹ (Câ)` for an asymptotic covariance `V`.
pub fn wald_from_parts<T: Scalar>(
    a_hat: &DVector<T>,
    covariance: &DMatrix<T>,
    n_s: usize,
    contrast: &ContrastMatrix<T>,
) -> Result<WaldOutcome> {
    let c = contrast.matrix();
    if c.ncols() != a_hat.len() || covariance.nrows() != a_hat.len() || covariance.ncols() != a_hat.len() {
        return Err(KgcError::Parameter("contrast, estimate and covariance sizes disagree".into()));
    }
    let ca = c * a_hat;
    let middle = c * covariance * c.transpose();
    let inv = checked_inverse(&middle, "restricted covariance C(Γ⁻¹⊗Σ)Cᵀ", WALD_CONDITION_CAP)?;
    let quad = (ca.transpose() * inv * &ca)[(0, 0)];
    let statistic = (T::from_usize_lossy(n_s) * quad).as_f64().max(0.0);
    let dof = contrast.rank();
    Ok(WaldOutcome { statistic, dof, p_value: chi2_sf(statistic, dof as f64)? })
}

/// `Γ⁻¹ ⊗ Σ`, the asymptotic covariance of `√n_s · â`.
pub fn coefficient_covariance<T: Scalar>(model: &KvarModel<T>) -> Result<DMatrix<T>> {
    let gamma_inv = checked_inverse(&model.gamma, "Gamma", WALD_CONDITION_CAP)?;
    Ok(gamma_inv.kronecker(&model.sigma_w))
}

pub fn wald_statistic<T: Scalar>(model: &KvarModel<T>, contrast: &ContrastMatrix<T>) -> Result<WaldOutcome> {
    let cov = coefficient_covariance(model)?;
    wald_from_parts(&vec_coeffs(&model.coeffs), &cov, model.sample_count, contrast)
}

/// Outcome of testing one directed pair `target ← source`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcTestResult {
    pub source: usize,
    pub target: usize,
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub alpha: f64,
    pub reject: bool,
    /// `a_{target,source}(k)` for `k = 1..=p`.
    pub estimates: Vec<f64>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(KgcError::Parameter(format!("significance level must be in (0, 1], got {alpha}")))
    }
}

/// Tests whether `source` Granger-causes `target` in feature space.
pub fn gc_test<T: Scalar>(model: &KvarModel<T>, target: usize, source: usize, alpha: f64) -> Result<GcTestResult> {
    check_alpha(alpha)?;
    let contrast = gc_contrast(model.dim(), model.order, target, source)?;
    let out = wald_statistic(model, &contrast)?;
    Ok(GcTestResult {
        source,
        target,
        statistic: out.statistic,
        dof: out.dof,
        p_value: out.p_value,
        alpha,
        reject: out.p_value < alpha,
        estimates: (1..=model.order).map(|k| model.coeffs.coefficient(target, source, k).as_f64()).collect(),
    })
}

/// Every ordered pair `i ← j`, `i ≠ j`, target-major.
pub fn gc_test_all_pairs<T: Scalar>(model: &KvarModel<T>, alpha: f64) -> Result<Vec<GcTestResult>> {
    check_alpha(alpha)?;
    let d = model.dim();
    if d < 2 {
        return Err(KgcError::Parameter("causality testing needs at least two channels".into()));
    }
    let cov = coefficient_covariance(model)?;
    let a_hat = vec_coeffs(&model.coeffs);
    let mut out = Vec::with_capacity(d * (d - 1));
    for target in 0..d {
        for source in (0..d).filter(|&s| s != target) {
            let contrast = gc_contrast(d, model.order, target, source)?;
            let w = wald_from_parts(&a_hat, &cov, model.sample_count, &contrast)?;
            out.push(GcTestResult {
                source,
                target,
                statistic: w.statistic,
                dof: w.dof,
                p_value: w.p_value,
                alpha,
                reject: w.p_value < alpha,
                estimates: (1..=model.order).map(|k| model.coeffs.coefficient(target, source, k).as_f64()).collect(),
            });
        }
    }
    Ok(out)
}

/// Normal order-statistic medians `Φ⁻¹(u_i)` (Filliben's approximation).
pub fn normal_order_medians(n: usize) -> Result<Vec<f64>> {
    if n < 3 {
        return Err(KgcError::Parameter("normal order medians need at least 3 points".into()));
    }
    let nf = n as f64;
    let last = 0.5f64.powf(1.0 / nf);
    (1..=n)
        .map(|i| {
            let u = if i == 1 {
                1.0 - last
            } else if i == n {
                last
            } else {
                (i as f64 - 0.3175) / (nf + 0.365)
            };
            normal_quantile(u)
        })
        .collect()
}

/// Squared correlation between the sorted sample and normal order-statistic
/// medians; close to 1 for normal data.
pub fn filliben_coefficient(sample: &[f64]) -> Result<f64> {
    let medians = normal_order_medians(sample.len())?;
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(KgcError::Data("Filliben coefficient needs finite values".into()));
    }
    let mut xs = sample.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let mm = medians.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, m) in xs.iter().zip(&medians) {
        sxy += (x - mx) * (m - mm);
        sxx += (x - mx) * (x - mx);
        syy += (m - mm) * (m - mm);
    }
    if sxx <= 0.0 {
        return Err(KgcError::Data("Filliben coefficient is undefined for a constant sample".into()));
    }
    Ok((sxy * sxy / (sxx * syy)).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn column_stacking() {
        let c = VarCoefficients::new(vec![DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])]).unwrap();
        assert_eq!(vec_coeffs(&c).as_slice(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn vec_index_oracle_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 3;
        let blocks: Vec<DMatrix<f64>> =
            (0..2).map(|_| DMatrix::from_fn(d, d, |_, _| rng.sample(StandardNormal))).collect();
        let c = VarCoefficients::new(blocks).unwrap();
        let a = vec_coeffs(&c);
        for k in 1..=2 {
            for r in 0..d {
                for col in 0..d {
                    assert_eq!(a[(k - 1) * d * d + col * d + r], c.lag(k)[(r, col)]);
                    assert_eq!(a[coefficient_index(d, r, col, k)], c.coefficient(r, col, k));
                }
            }
        }
        assert_eq!(unvec_coeffs(&a, d).unwrap(), c);
        assert!(unvec_coeffs(&DVector::<f64>::zeros(5), 2).is_err());
    }

    #[test]
    fn contrast_positions() {
        let c = gc_contrast::<f64>(2, 1, 1, 0).unwrap();
        assert_eq!(c.matrix().as_slice(), &[0.0, 1.0, 0.0, 0.0]); // α_21
        let c = gc_contrast::<f64>(2, 1, 0, 1).unwrap();
        assert_eq!(c.matrix().row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0, 0.0]); // α_12
        let c = gc_contrast::<f64>(3, 2, 2, 0).unwrap();
        assert_eq!(c.rank(), 2);
        for k in 1..=2 {
            let row = c.matrix().row(k - 1);
            let hot: Vec<usize> = (0..18).filter(|&i| row[i] == 1.0).collect();
            assert_eq!(hot, vec![(k - 1) * 9 + 2]);
        }
        assert!(gc_contrast::<f64>(2, 1, 1, 1).is_err());
        assert!(gc_contrast::<f64>(2, 1, 2, 0).is_err());
    }

    #[test]
    fn scalar_wald() {
        let c = ContrastMatrix::new(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let w = wald_from_parts(&DVector::from_element(1, 0.2), &DMatrix::from_element(1, 1, 0.04), 100, &c).unwrap();
        assert!((w.statistic - 100.0).abs() < 1e-10);
        assert!(w.p_value < 0.01);
        let w0 = wald_from_parts(&DVector::from_element(1, 0.0), &DMatrix::from_element(1, 1, 0.04), 100, &c).unwrap();
        assert_eq!(w0.statistic, 0.0);
        assert_eq!(w0.p_value, 1.0);
    }

    #[test]
    fn singular_restricted_covariance_is_reported() {
        let c = ContrastMatrix::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        let v = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        let err = wald_from_parts(&DVector::from_vec(vec![0.1, 0.2]), &v, 50, &c).unwrap_err();
        assert!(matches!(err, KgcError::Singular { .. }));
        assert!(ContrastMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 2.0, 0.0])).is_err());
    }

    #[test]
    fn filliben_perfect_and_constant() {
        let m = normal_order_medians(25).unwrap();
        assert!((filliben_coefficient(&m).unwrap() - 1.0).abs() < 1e-12);
        assert!(filliben_coefficient(&[1.0; 10]).is_err());
        assert!(filliben_coefficient(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn filliben_large_normal_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        assert!(filliben_coefficient(&xs).unwrap() > 0.999);
        let skewed: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        assert!(filliben_coefficient(&skewed).unwrap() < 0.9);
    }

    proptest! {
        #[test]
        fn filliben_affine_invariant(
            xs in proptest::collection::vec(-10.0f64..10.0, 5..40),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            prop_assume!(xs.iter().any(|&x| (x - xs[0]).abs() > 1e-6));
            let r = filliben_coefficient(&xs).unwrap();
            let ys: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            prop_assert!((filliben_coefficient(&ys).unwrap() - r).abs() < 1e-9);
        }

        #[test]
        fn wald_nonnegative_and_row_scale_invariant(
            a in proptest::collection::vec(-1.0f64..1.0, 8),
            l in proptest::collection::vec(-1.0f64..1.0, 36),
            s in proptest::collection::vec(0.1f64..10.0, 2),
        ) {
            // V = L Lᵀ + 0.1 I is a valid covariance.
            let lm = DMatrix::from_row_slice(8, 8, &[&l[..], &l[..28]].concat());
            let v = &lm * lm.transpose() + DMatrix::identity(8, 8) * 0.1;
            let c = gc_contrast::<f64>(2, 2, 0, 1).unwrap();
            let a = DVector::from_vec(a);
            let w = wald_from_parts(&a, &v, 200, &c).unwrap();
            prop_assert!(w.statistic >= 0.0);
            let w2 = wald_from_parts(&a, &v, 200, &c.row_scaled(&s).unwrap()).unwrap();
            prop_assert!((w.statistic - w2.statistic).abs() <= 1e-8 * (1.0 + w.statistic));
            let ca = c.matrix() * &a;
            prop_assert_eq!(w.statistic == 0.0, ca.iter().all(|&x| x == 0.0));
        }
    }
}
