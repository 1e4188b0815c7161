use kgc_core::kvar::{assemble_yw, fit_from_kernels, solve_ls};
use kgc_core::simulate::{example1, Term};
use kgc_core::*;
use nalgebra::DMatrix;

fn linear_var2() -> SystemSpec {
    SystemSpec::custom(
        "var2",
        2,
        vec![
            Term::linear(0, 0, 1, 0.5),
            Term::linear(0, 1, 1, 0.2),
            Term::linear(0, 0, 2, -0.3),
            Term::linear(1, 1, 1, 0.4),
            Term::linear(1, 0, 2, 0.25),
        ],
    )
    .unwrap()
}

/// Classical biased autocovariance `Γ(h) = (1/n) Σ_t x(t+h) x(t)ᵀ`, raw moments.
fn autocov(x: &[Vec<f64>], h: usize) -> DMatrix<f64> {
    let n = x[0].len();
    let d = x.len();
    DMatrix::from_fn(d, d, |i, j| (0..n - h).map(|t| x[i][t + h] * x[j][t]).sum::<f64>() / n as f64)
}

/// `x(t) = Σ_k A_k x(t−k)`: `Γ(h) = Σ_k A_k Γ(h−k)` for `h = 1..p`.
fn classical_yule_walker(x: &[Vec<f64>], p: usize) -> DMatrix<f64> {
    let d = x.len();
    let g = |h: isize| if h >= 0 { autocov(x, h as usize) } else { autocov(x, (-h) as usize).transpose() };
    let mut lhs = DMatrix::zeros(d * p, d * p);
    let mut rhs = DMatrix::zeros(d, d * p);
    for h in 1..=p {
        rhs.view_mut((0, (h - 1) * d), (d, d)).copy_from(&g(h as isize));
        for k in 1..=p {
            lhs.view_mut(((k - 1) * d, (h - 1) * d), (d, d)).copy_from(&g(h as isize - k as isize));
        }
    }
    rhs * lhs.try_inverse().unwrap()
}

#[test]
fn linear_kernel_matches_classical_yule_walker() {
    let panel: Panel64 = simulate(&linear_var2(), &SimulationConfig::new(4096, 11).burn_in(2000)).unwrap();
    let oracle = classical_yule_walker(panel.channels(), 2);
    for solver in [Solver::Ls, Solver::Tls] {
        let opts = FitOptions { solver, ..FitOptions::default() };
        let model = fit(&panel, &KernelSpec::linear(), 2, &opts).unwrap();
        let err = (model.coeffs.concatenated() - &oracle).norm();
        assert!(err <= 1e-6, "{solver}: {err}");
    }
    // Sanity on the truth itself.
    assert!((oracle[(0, 0)] - 0.5).abs() < 0.06);
    assert!((oracle[(1, 2)] - 0.25).abs() < 0.06);
}

/// Population moments of `x(t) = A x(t−1) + w(t)`, `E wwᵀ = Q`, in the
/// `K(τ) = E x(t) x(t+τ)ᵀ` convention.
fn population_var1(a: &DMatrix<f64>, q: &DMatrix<f64>, max_lag: usize) -> LaggedKernelSet64 {
    let mut c0 = q.clone();
    let mut term = q.clone();
    for _ in 0..2000 {
        term = a * term * a.transpose();
        c0 += &term;
    }
    let mut lags = vec![c0.clone()];
    let mut at = a.transpose();
    for _ in 1..=max_lag {
        lags.push(&c0 * &at);
        at = &at * a.transpose();
    }
    let names = (1..=a.nrows()).map(|i| format!("x{i}")).collect();
    LaggedKernelSet::from_nonnegative(lags, 1000, names).unwrap()
}

#[test]
fn complete_form_identity_on_population_moments() {
    let a = DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, -0.2, 0.3, 0.2, 0.0, 0.25, -0.4]);
    let q = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.0, 0.3, 2.0, -0.1, 0.0, -0.1, 0.5]);
    let ks = population_var1(&a, &q, 6);
    for p in 1..=3 {
        let coeffs = solve_ls(&assemble_yw(&ks, p).unwrap(), 1e12).unwrap();
        assert!((coeffs.lag(1) - &a).norm() < 1e-9);
        for k in 2..=p {
            assert!(coeffs.lag(k).norm() < 1e-9);
        }
        let model = fit_from_kernels(ks.clone(), KernelSpec::linear(), p, 2, &FitOptions::default()).unwrap();
        let big = kgc_core::kvar::build_gamma(&ks, p + 1).unwrap();
        assert!(model.yw_residual <= 1e-8 * big.norm(), "p={p}: {}", model.yw_residual);
        assert!((&model.sigma_w - &q).norm() < 1e-9);
    }
}

#[test]
fn channel_permutation_is_equivariant() {
    let spec = builtin_system("example3").unwrap();
    let panel: Panel64 = simulate(&spec, &SimulationConfig::new(1024, 3).burn_in(1000)).unwrap();
    let perm = [2usize, 0, 1];
    let permuted = panel.permuted(&perm).unwrap();
    let opts = FitOptions { solver: Solver::Ls, ..FitOptions::default() };
    let m = fit(&panel, &KernelSpec::quadratic(), 2, &opts).unwrap();
    let mp = fit(&permuted, &KernelSpec::quadratic(), 2, &opts).unwrap();
    let d = 3;
    for k in 1..=2 {
        for i in 0..d {
            for j in 0..d {
                let lhs = mp.coeffs.lag(k)[(i, j)];
                let rhs = m.coeffs.lag(k)[(perm[i], perm[j])];
                assert!((lhs - rhs).abs() < 1e-9 * (1.0 + rhs.abs()));
            }
        }
    }
    for i in 0..d {
        for j in 0..d {
            assert!((mp.sigma_w[(i, j)] - m.sigma_w[(perm[i], perm[j])]).abs() < 1e-9 * m.sigma_w.norm());
            for (r, c) in [(0, 0), (0, 1), (1, 0)] {
                let g = mp.gamma[(r * d + i, c * d + j)];
                let h = m.gamma[(r * d + perm[i], c * d + perm[j])];
                assert!((g - h).abs() < 1e-9 * m.gamma.norm());
            }
        }
    }
}

#[test]
fn sigma_is_psd_on_builtin_fits() {
    for spec in builtin_systems() {
        let panel: Panel64 = simulate(&spec, &SimulationConfig::new(1024, 17).burn_in(2000)).unwrap();
        let model = fit(&panel, &KernelSpec::quadratic(), spec.true_order(), &FitOptions::default()).unwrap();
        let s = &model.sigma_w;
        assert!((s - s.transpose()).norm() <= 1e-9 * s.norm());
        let min = s.clone().symmetric_eigen().eigenvalues.min();
        assert!(min >= -1e-9 * s.norm(), "{}: {min}", spec.name);
    }
}

#[test]
fn example1_fit_recovers_structure() {
    let panel: Panel64 = simulate(&example1(0.2, 0.6, 0.7), &SimulationConfig::new(2048, 1)).unwrap();
    let model = fit(&panel, &KernelSpec::quadratic(), 1, &FitOptions::default()).unwrap();
    assert_eq!(model.solver, Solver::Tls);
    assert!(model.coeffs.coefficient(1, 0, 1).abs() < 0.1);
    assert!(model.coeffs.coefficient(0, 1, 1).abs() > 0.1);
    let tests = gc_test_all_pairs(&model, 0.01).unwrap();
    assert_eq!((tests[0].target, tests[0].source), (0, 1));
    assert!(tests[0].reject);
}

#[test]
fn single_precision_pipeline() {
    let panel: Panel32 = simulate(&example1(0.2, 0.6, 0.7), &SimulationConfig::new(1024, 2)).unwrap();
    let model: KvarModel32 = fit(&panel, &KernelSpec32::quadratic(), 1, &FitOptions::default()).unwrap();
    let panel64: Panel64 = simulate(&example1(0.2, 0.6, 0.7), &SimulationConfig::new(1024, 2)).unwrap();
    let model64 = fit(&panel64, &KernelSpec64::quadratic(), 1, &FitOptions::default()).unwrap();
    let diff = (model.coeffs.coefficient(0, 1, 1) as f64 - model64.coeffs.coefficient(0, 1, 1)).abs();
    assert!(diff < 1e-3, "{diff}");
    let tests = gc_test_all_pairs(&model, 0.01).unwrap();
    assert_eq!(tests.len(), 2);
    assert!(tests.iter().all(|t| t.statistic >= 0.0));
}

#[test]
fn whiteness_report_on_fitted_model() {
    let panel: Panel64 = simulate(&example1(0.2, 0.6, 0.7), &SimulationConfig::new(512, 4)).unwrap();
    let model = fit(&panel, &KernelSpec::quadratic(), 1, &FitOptions::default()).unwrap();
    let lags = model.residual_lags(ResidualLagForm::Exact).unwrap();
    let r = residual_kcf(&lags).unwrap();
    assert!((r.at(0)[(0, 0)] - 1.0).abs() < 1e-12);
    let report = whiteness_test(&r, 512, 0.01, model.diagnostic_lag, 1).unwrap();
    assert_eq!(report.max_lag, 20);
    assert_eq!(report.flags.len(), 2 * 20 * 4);
    assert!(report.flags.iter().all(|f| f.value.abs() <= 1.0 + 1e-9));
    assert_eq!(report.dof, 4 * 19);
}
