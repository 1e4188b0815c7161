//! Dense helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, SVD};

use crate::error::{KgcError, Result};
use crate::scalar::Scalar;

/// Singular values in descending order.
pub fn singular_values<T: Scalar>(m: &DMatrix<T>) -> Vec<T> {
    let mut s: Vec<T> = m.clone().singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    s
}

/// 2-norm condition number; infinite for singular matrices.
pub fn condition_number<T: Scalar>(m: &DMatrix<T>) -> f64 {
    let s = singular_values(m);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > T::zero() => (hi / lo).as_f64(),
        _ => f64::INFINITY,
    }
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * T::lit(0.5)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue<T: Scalar>(m: &DMatrix<T>) -> T {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(T::max_value().unwrap_or_else(T::one), |a, b| a.min(b))
}

/// `1/√m_ii` per row, or ones when some diagonal entry is not positive.
pub fn equilibration<T: Scalar>(m: &DMatrix<T>) -> DVector<T> {
    let diag = m.diagonal();
    if diag.iter().all(|&v| v > T::zero() && v.finite()) {
        diag.map(|v| T::one() / v.sqrt())
    } else {
        DVector::from_element(diag.len(), T::one())
    }
}

/// `diag(s) · m · diag(s)`.
pub fn scale_symmetric<T: Scalar>(m: &DMatrix<T>, s: &DVector<T>) -> DMatrix<T> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| s[i] * m[(i, j)] * s[j])
}

/// Condition number after symmetric diagonal equilibration. Moment matrices
/// mix channels whose kernel power differs by many orders of magnitude; the
/// scaled condition measures collinearity rather than units.
pub fn scaled_condition_number<T: Scalar>(m: &DMatrix<T>) -> f64 {
    condition_number(&scale_symmetric(m, &equilibration(m)))
}

/// Inverse of a square matrix with a condition check, computed through the
/// diagonally equilibrated matrix.
pub fn checked_inverse<T: Scalar>(m: &DMatrix<T>, what: &str, cap: f64) -> Result<DMatrix<T>> {
    let s = equilibration(m);
    let scaled = scale_symmetric(m, &s);
    let condition = condition_number(&scaled);
    if !(condition <= cap) {
        return Err(KgcError::Singular { what: what.into(), condition });
    }
    scaled
        .try_inverse()
        .map(|inv| scale_symmetric(&inv, &s))
        .ok_or_else(|| KgcError::Singular { what: what.into(), condition })
}

/// Kronecker product.
pub fn kron<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    a.kronecker(b)
}

/// Least-squares solution of `A X = B` through the SVD of `A`.
pub fn least_squares<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    if a.nrows() != b.nrows() {
        return Err(KgcError::Parameter("least squares: row count mismatch".into()));
    }
    let svd = SVD::new(a.clone(), true, true);
    let smax = svd.singular_values.iter().copied().fold(T::zero(), |x, y| x.max(y));
    let eps = smax * T::default_epsilon() * T::from_usize_lossy(a.nrows().max(a.ncols()));
    let rank = svd.rank(eps);
    if rank < a.ncols() {
        return Err(KgcError::RankDeficient(format!(
            "coefficient matrix has rank {rank} < {}",
            a.ncols()
        )));
    }
    svd.solve(b, eps).map_err(|e| KgcError::RankDeficient(e.to_string()))
}

/// Relative singular gap below which a TLS solution is treated as non-unique.
pub const TLS_GAP_TOLERANCE: f64 = 1e-10;

/// Multivariate total least squares for `A X ≈ B` (Golub & Van Loan).
///
/// Takes the right singular vectors `V` of the augmented matrix `[A | B]`
/// (`m × (n+k)`), partitions the trailing `k` columns as `[V12; V22]`
/// and returns `X = −V12 · V22⁻¹`. Rows of zeros are appended when
/// `m < n + k`; they leave the right singular subspace unchanged.
pub fn total_least_squares<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    let (m, n, k) = (a.nrows(), a.ncols(), b.ncols());
    if b.nrows() != m {
        return Err(KgcError::Parameter("total least squares: row count mismatch".into()));
    }
    if m < n {
        return Err(KgcError::Parameter(format!(
            "total least squares needs at least {n} equations, got {m}"
        )));
    }

    let a_sv = singular_values(a);
    let a_max = a_sv[0];
    let a_min = *a_sv.last().expect("non-empty");
    let rank_tol = a_max * T::default_epsilon() * T::from_usize_lossy(m.max(n));
    if !(a_min > rank_tol) {
        return Err(KgcError::RankDeficient(format!(
            "coefficient matrix smallest singular value {} at tolerance {}",
            a_min, rank_tol
        )));
    }

    let rows = m.max(n + k);
    let mut aug = DMatrix::<T>::zeros(rows, n + k);
    aug.view_mut((0, 0), (m, n)).copy_from(a);
    aug.view_mut((0, n), (m, k)).copy_from(b);

    let svd = SVD::new(aug, false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| {
        svd.singular_values[j]
            .partial_cmp(&svd.singular_values[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let sv: Vec<T> = order.iter().map(|&i| svd.singular_values[i]).collect();

    // Generic solvability: σ_n([A|B]) strictly above σ_{n+1}([A|B]).
    let gap = (sv[n - 1] - sv[n]) / sv[0];
    if !(gap.as_f64() > TLS_GAP_TOLERANCE) {
        return Err(KgcError::NonUniqueSolution(format!(
            "relative singular gap {:e} below {:e}",
            gap.as_f64(),
            TLS_GAP_TOLERANCE
        )));
    }

    // Columns of V spanning the smallest k singular directions.
    let mut v12 = DMatrix::<T>::zeros(n, k);
    let mut v22 = DMatrix::<T>::zeros(k, k);
    for (col, &idx) in order[n..n + k].iter().enumerate() {
        let row = v_t.row(idx);
        for r in 0..n {
            v12[(r, col)] = row[r];
        }
        for r in 0..k {
            v22[(r, col)] = row[n + r];
        }
    }
    let cond = condition_number(&v22);
    let v22_inv = v22.try_inverse().filter(|_| cond < 1e14).ok_or_else(|| {
        KgcError::NonUniqueSolution(format!("trailing singular block is singular (condition {cond:e})"))
    })?;
    Ok(-(v12 * v22_inv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn tls_equals_ls_on_consistent_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (m, n, k) in [(6, 6, 2), (10, 4, 3), (4, 4, 4)] {
            let a = random(&mut rng, m, n, 1.0);
            let x = random(&mut rng, n, k, 1.0);
            let b = &a * &x;
            let ls = least_squares(&a, &b).unwrap();
            let tls = total_least_squares(&a, &b).unwrap();
            assert!((&ls - &x).norm() < 1e-9);
            assert!((&tls - &ls).norm() < 1e-8, "{m}x{n}x{k}");
        }
    }

    #[test]
    fn tls_beats_ls_under_errors_in_variables() {
        // Noise on both sides biases LS toward zero; TLS stays consistent.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut err_ls, mut err_tls) = (0.0, 0.0);
        for _ in 0..100 {
            let a = random(&mut rng, 200, 3, 1.0);
            let x = random(&mut rng, 3, 2, 1.0);
            let b = &a * &x;
            let a_noisy = &a + random(&mut rng, 200, 3, 0.3);
            let b_noisy = &b + random(&mut rng, 200, 2, 0.3);
            err_ls += (least_squares(&a_noisy, &b_noisy).unwrap() - &x).norm();
            err_tls += (total_least_squares(&a_noisy, &b_noisy).unwrap() - &x).norm();
        }
        assert!(err_tls <= err_ls, "tls {err_tls} ls {err_ls}");
    }

    #[test]
    fn tls_detects_degeneracy() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        assert!(matches!(total_least_squares(&a, &b), Err(KgcError::RankDeficient(_))));
        assert!(matches!(least_squares(&a, &b), Err(KgcError::RankDeficient(_))));
    }

    #[test]
    fn identity_system() {
        let a = DMatrix::<f64>::identity(2, 2);
        let b = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.3]);
        let x = total_least_squares(&a, &b).unwrap();
        assert!((x - &b).norm() < 1e-12);
    }
}
