//! Distribution functions used by the tests, evaluated in `f64`.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{KgcError, Result};

/// Upper-tail probability `P(χ²_ν > x)`.
pub fn chi2_sf(x: f64, dof: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(KgcError::Parameter(format!("chi-squared argument must be >= 0, got {x}")));
    }
    if !(dof > 0.0) || !dof.is_finite() {
        return Err(KgcError::Parameter(format!("chi-squared degrees of freedom must be positive, got {dof}")));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    if x == f64::INFINITY {
        return Ok(0.0);
    }
    let d = ChiSquared::new(dof).map_err(|e| KgcError::Parameter(e.to_string()))?;
    Ok(d.sf(x).clamp(0.0, 1.0))
}

pub fn chi2_cdf(x: f64, dof: f64) -> Result<f64> {
    Ok(1.0 - chi2_sf(x, dof)?)
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Standard normal quantile `Φ⁻¹(q)`.
pub fn normal_quantile(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(KgcError::Parameter(format!("normal quantile needs q in (0, 1), got {q}")));
    }
    Ok(standard_normal().inverse_cdf(q))
}

pub fn normal_cdf(x: f64) -> f64 {
    standard_normal().cdf(x)
}

/// One-sample Kolmogorov–Smirnov outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsOutcome {
    pub statistic: f64,
    pub p_value: f64,
}

/// Kolmogorov–Smirnov test of `sample` against a continuous CDF.
///
/// The p-value uses the asymptotic Kolmogorov distribution with
/// Stephens' small-sample correction.
pub fn ks_test(sample: &[f64], cdf: impl Fn(f64) -> f64) -> Result<KsOutcome> {
    if sample.is_empty() {
        return Err(KgcError::Parameter("KS test needs at least one observation".into()));
    }
    let mut xs = sample.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = xs.len() as f64;
    let statistic = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    let sqrt_n = n.sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * statistic;
    Ok(KsOutcome { statistic, p_value: kolmogorov_sf(lambda) })
}

/// `P(K > λ)` for the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_values() {
        assert_eq!(chi2_sf(0.0, 3.0).unwrap(), 1.0);
        assert!((chi2_sf(3.841, 1.0).unwrap() - 0.05).abs() < 1e-3);
        assert!((chi2_sf(6.635, 1.0).unwrap() - 0.01).abs() < 1e-4);
        assert!((chi2_sf(18.307, 10.0).unwrap() - 0.05).abs() < 1e-4);
        assert!((normal_quantile(0.995).unwrap() - 2.576).abs() < 1e-3);
        assert!((normal_quantile(0.975).unwrap() - 1.959_963_984_540_054).abs() < 1e-9);
        assert!(normal_quantile(0.5).unwrap().abs() < 1e-12);
    }

    #[test]
    fn closed_form_cross_checks() {
        // χ²_2 survival is exp(−x/2); χ²_1 survival is 2(1 − Φ(√x)).
        for &x in &[0.1, 1.0, 2.5, 7.0, 20.0] {
            assert!((chi2_sf(x, 2.0).unwrap() - (-x / 2.0).exp()).abs() < 1e-10);
            assert!((chi2_sf(x, 1.0).unwrap() - 2.0 * (1.0 - normal_cdf(x.sqrt()))).abs() < 1e-10);
        }
    }

    #[test]
    fn domain_errors() {
        assert!(chi2_sf(-1.0, 1.0).is_err());
        assert!(chi2_sf(1.0, 0.0).is_err());
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(1.0).is_err());
        assert!(ks_test(&[], |x| x).is_err());
    }

    #[test]
    fn ks_uniform_grid() {
        let n = 200;
        let grid: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let out = ks_test(&grid, |x| x.clamp(0.0, 1.0)).unwrap();
        assert!((out.statistic - 0.5 / n as f64).abs() < 1e-12);
        assert!(out.p_value > 0.99);
        let shifted: Vec<f64> = grid.iter().map(|x| x * 0.5).collect();
        assert!(ks_test(&shifted, |x| x.clamp(0.0, 1.0)).unwrap().p_value < 1e-6);
    }

    #[test]
    fn kolmogorov_critical_value() {
        // 5% critical value of the limiting distribution is 1.3581.
        assert!((kolmogorov_sf(1.3581) - 0.05).abs() < 1e-4);
    }
}
