//! Fitting, testing and diagnostics on one panel, plus their JSON reports.
//!
//! Channels are numbered from 1 in every report, as in `x1 ← x2`.

use kgc_core::diagnostics::WhitenessReport;
use kgc_core::{
    fit, gc_test_all_pairs, order_scan, residual_kcf, whiteness_test, FitOptions, GcTestResult, KvarModel64,
    OrderScan, Panel64, ResidualLagForm,
};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::settings::{centering_name, FitSettings, OrderChoice};

/// Version tag carried by every JSON document.
pub const SCHEMA_VERSION: u32 = 1;

pub struct Fitted {
    pub model: KvarModel64,
    pub scan: Option<OrderScan>,
}

pub fn fit_options(settings: &FitSettings) -> FitOptions {
    FitOptions {
        solver: settings.solver,
        centering: settings.centering,
        condition_cap: settings.condition_cap,
        diagnostic_lag: settings.lags,
    }
}

/// Resolves the order (scanning when asked) and fits the model.
pub fn fit_panel(panel: &Panel64, settings: &FitSettings, true_order: Option<usize>) -> CliResult<Fitted> {
    let opts = fit_options(settings);
    let (order, scan) = match settings.order {
        OrderChoice::Fixed(p) => (p, None),
        OrderChoice::True => match true_order {
            Some(p) => (p, None),
            None => return Err(CliError::Usage("order 'true' needs a simulated system".into())),
        },
        OrderChoice::Auto => {
            let scan = order_scan(panel, &settings.kernel, settings.p_max, settings.criterion, &opts)?;
            (scan.selected, Some(scan))
        }
    };
    let model = fit(panel, &settings.kernel, order, &opts)?;
    Ok(Fitted { model, scan })
}

/// Residual whiteness at the model's diagnostic depth, when that depth
/// exceeds the order.
pub fn whiteness(model: &KvarModel64, alpha: f64, form: ResidualLagForm) -> CliResult<Option<WhitenessReport>> {
    if model.diagnostic_lag <= model.order {
        return Ok(None);
    }
    let lags = model.residual_lags(form)?;
    let r = residual_kcf(&lags)?;
    Ok(Some(whiteness_test(&r, model.sample_count, alpha, model.diagnostic_lag, model.order)?))
}

pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelReport {
    pub family: &'static str,
    pub offset: f64,
    pub degree: u32,
}

impl KernelReport {
    pub fn of(model: &KvarModel64) -> Self {
        Self { family: "poly", offset: model.kernel.offset(), degree: model.kernel.degree() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CandidateReport {
    pub order: usize,
    pub value: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OrderScanReport {
    pub criterion: String,
    pub candidates: Vec<CandidateReport>,
    pub selected: usize,
}

impl From<&OrderScan> for OrderScanReport {
    fn from(s: &OrderScan) -> Self {
        Self {
            criterion: s.flavor.to_string(),
            candidates: s
                .candidates
                .iter()
                .map(|c| CandidateReport { order: c.order, value: c.value, note: c.note.clone() })
                .collect(),
            selected: s.selected,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CoefficientEntry {
    /// `a_ij(k)` with 1-based channels.
    pub label: String,
    pub target: usize,
    pub source: usize,
    pub target_name: String,
    pub source_name: String,
    pub lag: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct WhitenessSummary {
    pub alpha: f64,
    pub max_lag: usize,
    pub threshold: f64,
    pub values: usize,
    pub exceed_count: usize,
    pub fraction_inside: f64,
    pub portmanteau_q: f64,
    pub dof: usize,
    pub p_value: f64,
    pub rejects_whiteness: bool,
}

impl From<&WhitenessReport> for WhitenessSummary {
    fn from(w: &WhitenessReport) -> Self {
        Self {
            alpha: w.alpha,
            max_lag: w.max_lag,
            threshold: w.threshold,
            values: w.flags.len(),
            exceed_count: w.exceed_count(),
            fraction_inside: w.fraction_inside(),
            portmanteau_q: w.q,
            dof: w.dof,
            p_value: w.p_value,
            rejects_whiteness: w.rejects_whiteness(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelHeader {
    pub sample_count: usize,
    pub channels: Vec<String>,
    pub kernel: KernelReport,
    pub centering: &'static str,
    pub solver: String,
    pub order: usize,
    pub order_scan: Option<OrderScanReport>,
}

impl ModelHeader {
    pub fn of(f: &Fitted) -> Self {
        let m = &f.model;
        Self {
            sample_count: m.sample_count,
            channels: m.names().to_vec(),
            kernel: KernelReport::of(m),
            centering: centering_name(m.centering),
            solver: m.solver.to_string(),
            order: m.order,
            order_scan: f.scan.as_ref().map(OrderScanReport::from),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub input: String,
    #[serde(flatten)]
    pub header: ModelHeader,
    pub solver_requested: String,
    /// `A_k` blocks, row-major, `k = 1..p`.
    pub coefficients: Vec<Vec<Vec<f64>>>,
    pub coefficient_table: Vec<CoefficientEntry>,
    pub sigma_w: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    /// `‖[I −𝒜]·𝒦_{p+1}(0) − [Σ 0 … 0]‖_F`.
    pub yule_walker_residual: f64,
    pub whiteness: Option<WhitenessSummary>,
    pub warnings: Vec<String>,
}

pub fn coefficient_table(model: &KvarModel64) -> Vec<CoefficientEntry> {
    let d = model.dim();
    let names = model.names();
    let mut out = Vec::with_capacity(d * d * model.order);
    for k in 1..=model.order {
        for i in 0..d {
            for j in 0..d {
                out.push(CoefficientEntry {
                    label: format!("a_{}{}({k})", i + 1, j + 1),
                    target: i + 1,
                    source: j + 1,
                    target_name: names[i].clone(),
                    source_name: names[j].clone(),
                    lag: k,
                    value: model.coeffs.coefficient(i, j, k),
                });
            }
        }
    }
    out
}

pub fn fit_report(
    input: &str,
    fitted: &Fitted,
    settings: &FitSettings,
    white: Option<&WhitenessReport>,
) -> FitReport {
    let m = &fitted.model;
    let mut warnings = m.warnings.clone();
    if white.is_none() {
        warnings.push(format!(
            "whiteness test skipped: diagnostic lag {} does not exceed order {}",
            m.diagnostic_lag, m.order
        ));
    }
    FitReport {
        schema_version: SCHEMA_VERSION,
        command: "fit",
        input: input.into(),
        header: ModelHeader::of(fitted),
        solver_requested: settings.solver.to_string(),
        coefficients: m.coeffs.blocks().iter().map(rows).collect(),
        coefficient_table: coefficient_table(m),
        sigma_w: rows(&m.sigma_w),
        gamma: rows(&m.gamma),
        yule_walker_residual: m.yw_residual,
        whiteness: white.map(WhitenessSummary::from),
        warnings,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PairReport {
    pub target: usize,
    pub source: usize,
    pub target_name: String,
    pub source_name: String,
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub reject: bool,
    pub estimates: Vec<f64>,
}

impl PairReport {
    pub fn of(r: &GcTestResult, names: &[String]) -> Self {
        Self {
            target: r.target + 1,
            source: r.source + 1,
            target_name: names[r.target].clone(),
            source_name: names[r.source].clone(),
            statistic: r.statistic,
            dof: r.dof,
            p_value: r.p_value,
            reject: r.reject,
            estimates: r.estimates.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GcReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub input: String,
    #[serde(flatten)]
    pub header: ModelHeader,
    pub alpha: f64,
    pub results: Vec<PairReport>,
    pub warnings: Vec<String>,
}

pub fn gc_report(input: &str, fitted: &Fitted, alpha: f64) -> CliResult<GcReport> {
    let m = &fitted.model;
    if m.dim() < 2 {
        return Err(CliError::Data("causality testing needs at least two channels; the panel has one".into()));
    }
    let results = gc_test_all_pairs(m, alpha)?;
    Ok(GcReport {
        schema_version: SCHEMA_VERSION,
        command: "gctest",
        input: input.into(),
        header: ModelHeader::of(fitted),
        alpha,
        results: results.iter().map(|r| PairReport::of(r, m.names())).collect(),
        warnings: m.warnings.clone(),
    })
}
