//! Replicated simulate → fit → test sweeps and detection-rate tables.
//!
//! Each replication draws its panel from its own seed stream, so results
//! depend only on the configuration, never on the worker count or the
//! order in which replications finish.

use std::io::Write;
use std::path::{Path, PathBuf};

use kgc_core::dist::normal_quantile;
use kgc_core::simulate::SystemSpec;
use kgc_core::{filliben_coefficient, gc_test_all_pairs, simulate, KgcError, Panel64, SimulationConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::io::write_json;
use crate::pipeline::{fit_panel, KernelReport, SCHEMA_VERSION};
use crate::settings::{centering_name, FitSettings, OrderChoice};

pub const DEFAULT_REPLICATIONS: usize = 1000;
pub const FULL_SCALE_REPLICATIONS: usize = 10_000;
pub const DEFAULT_LENGTHS: [usize; 7] = [32, 64, 128, 256, 512, 1024, 2048];
pub const DEFAULT_MAX_ATTEMPTS: usize = 10;

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub system: SystemSpec,
    pub fit: FitSettings,
    pub alpha: f64,
    pub lengths: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub burn_in: usize,
    /// Worker threads; `None` uses every core.
    pub workers: Option<usize>,
    /// Redraws allowed after a divergent trajectory.
    pub max_attempts: usize,
}

impl ExperimentConfig {
    pub fn new(system: SystemSpec) -> Self {
        Self {
            system,
            fit: FitSettings { order: OrderChoice::True, lags: Some(0), ..FitSettings::default() },
            alpha: 0.01,
            lengths: DEFAULT_LENGTHS.to_vec(),
            replications: DEFAULT_REPLICATIONS,
            seed: 1,
            burn_in: kgc_core::simulate::DEFAULT_BURN_IN,
            workers: None,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.replications == 0 {
            return usage("replications must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return usage(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.lengths.is_empty() {
            return usage("at least one series length is required".into());
        }
        if self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return usage("lengths must be strictly ascending".into());
        }
        if self.lengths[0] < 2 {
            return usage("series lengths must be at least 2".into());
        }
        if self.workers == Some(0) {
            return usage("workers must be at least 1".into());
        }
        if self.system.dim < 2 {
            return usage("Monte Carlo testing needs a system with at least two channels".into());
        }
        self.system.validate()?;
        Ok(())
    }

    /// Stream index of replication `rep` at the `pos`-th length.
    fn stream_index(&self, pos: usize, rep: usize) -> u64 {
        (pos * self.replications + rep) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairOutcome {
    pub target: usize,
    pub source: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
}

/// One fitted replication, or the reason it was dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub n_s: usize,
    pub replication: usize,
    /// Divergent draws discarded before this one.
    pub redraws: usize,
    pub order: Option<usize>,
    pub pairs: Vec<PairOutcome>,
    /// `A_k[target, source]` for every `k`, `target`, `source` (0-based).
    pub coefficients: Vec<(usize, usize, usize, f64)>,
    pub failure: Option<String>,
}

impl ReplicationRecord {
    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }

    pub fn coefficient(&self, target: usize, source: usize, lag: usize) -> Option<f64> {
        self.coefficients
            .iter()
            .find(|&&(t, s, k, _)| (t, s, k) == (target, source, lag))
            .map(|c| c.3)
    }

    pub fn pair(&self, target: usize, source: usize) -> Option<&PairOutcome> {
        self.pairs.iter().find(|p| p.target == target && p.source == source)
    }
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateCell {
    pub n_s: usize,
    /// 0-based channel indices.
    pub target: usize,
    pub source: usize,
    /// True when the ground-truth graph has `target ← source`.
    pub causal: bool,
    pub rejections: usize,
    pub count: usize,
    pub rate: f64,
    pub wilson_low: f64,
    pub wilson_high: f64,
}

impl RateCell {
    pub fn label(&self) -> &'static str {
        if self.causal {
            "TP"
        } else {
            "FP"
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FillibenCell {
    pub n_s: usize,
    pub target: usize,
    pub source: usize,
    pub lag: usize,
    pub count: usize,
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthSummary {
    pub n_s: usize,
    pub effective: usize,
    pub failed: usize,
    pub redraws: usize,
    /// `(order, count)` over successful replications.
    pub order_histogram: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct MonteCarloOutcome {
    pub config: ExperimentConfig,
    pub records: Vec<ReplicationRecord>,
    pub rates: Vec<RateCell>,
    pub filliben: Vec<FillibenCell>,
    pub lengths: Vec<LengthSummary>,
}

impl MonteCarloOutcome {
    pub fn rate(&self, n_s: usize, target: usize, source: usize) -> Option<&RateCell> {
        self.rates.iter().find(|c| c.n_s == n_s && c.target == target && c.source == source)
    }

    pub fn filliben(&self, n_s: usize, target: usize, source: usize, lag: usize) -> Option<&FillibenCell> {
        self.filliben
            .iter()
            .find(|c| (c.n_s, c.target, c.source, c.lag) == (n_s, target, source, lag))
    }

    pub fn records_at(&self, n_s: usize) -> impl Iterator<Item = &ReplicationRecord> {
        self.records.iter().filter(move |r| r.n_s == n_s)
    }
}

fn run_one(cfg: &ExperimentConfig, pos: usize, rep: usize) -> ReplicationRecord {
    let n_s = cfg.lengths[pos];
    let mut record = ReplicationRecord {
        n_s,
        replication: rep,
        redraws: 0,
        order: None,
        pairs: Vec::new(),
        coefficients: Vec::new(),
        failure: None,
    };
    let base = SimulationConfig::new(n_s, cfg.seed)
        .replication(cfg.stream_index(pos, rep))
        .burn_in(cfg.burn_in);
    let mut panel: Option<Panel64> = None;
    for attempt in 0..=cfg.max_attempts {
        match simulate(&cfg.system, &base.attempt(attempt as u64)) {
            Ok(p) => {
                panel = Some(p);
                break;
            }
            Err(KgcError::Divergence { .. }) => record.redraws += 1,
            Err(e) => {
                record.failure = Some(e.to_string());
                return record;
            }
        }
    }
    let Some(panel) = panel else {
        record.failure = Some(format!("trajectory diverged on all {} draws", cfg.max_attempts + 1));
        return record;
    };
    let fitted = match fit_panel(&panel, &cfg.fit, Some(cfg.system.true_order())) {
        Ok(f) => f,
        Err(e) => {
            record.failure = Some(e.to_string());
            return record;
        }
    };
    let model = &fitted.model;
    record.order = Some(model.order);
    match gc_test_all_pairs(model, cfg.alpha) {
        Ok(results) => {
            record.pairs = results
                .iter()
                .map(|r| PairOutcome {
                    target: r.target,
                    source: r.source,
                    statistic: r.statistic,
                    p_value: r.p_value,
                    reject: r.reject,
                })
                .collect();
        }
        Err(e) => {
            record.failure = Some(e.to_string());
            return record;
        }
    }
    let d = model.dim();
    for k in 1..=model.order {
        for i in 0..d {
            for j in 0..d {
                record.coefficients.push((i, j, k, model.coeffs.coefficient(i, j, k)));
            }
        }
    }
    record
}

/// Runs every replication at every length and aggregates the results.
pub fn run(cfg: &ExperimentConfig) -> CliResult<MonteCarloOutcome> {
    cfg.validate()?;
    let tasks: Vec<(usize, usize)> =
        (0..cfg.lengths.len()).flat_map(|pos| (0..cfg.replications).map(move |rep| (pos, rep))).collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        builder = builder.num_threads(w);
    }
    let pool = builder.build().map_err(|e| CliError::Usage(format!("worker pool: {e}")))?;
    let records: Vec<ReplicationRecord> =
        pool.install(|| tasks.par_iter().map(|&(pos, rep)| run_one(cfg, pos, rep)).collect());
    aggregate(cfg.clone(), records)
}

fn aggregate(config: ExperimentConfig, records: Vec<ReplicationRecord>) -> CliResult<MonteCarloOutcome> {
    let z = normal_quantile(0.975)?;
    let d = config.system.dim;
    let mut rates = Vec::new();
    let mut filliben = Vec::new();
    let mut lengths = Vec::new();
    for &n_s in &config.lengths {
        let at: Vec<&ReplicationRecord> = records.iter().filter(|r| r.n_s == n_s).collect();
        let ok: Vec<&ReplicationRecord> = at.iter().copied().filter(|r| r.is_ok()).collect();
        for target in 0..d {
            for source in (0..d).filter(|&s| s != target) {
                let rejections = ok.iter().filter(|r| r.pair(target, source).is_some_and(|p| p.reject)).count();
                let count = ok.len();
                let (wilson_low, wilson_high) = wilson_interval(rejections, count, z);
                rates.push(RateCell {
                    n_s,
                    target,
                    source,
                    causal: config.system.causes(target, source),
                    rejections,
                    count,
                    rate: if count > 0 { rejections as f64 / count as f64 } else { f64::NAN },
                    wilson_low,
                    wilson_high,
                });
                let max_lag = ok.iter().filter_map(|r| r.order).max().unwrap_or(0);
                for lag in 1..=max_lag {
                    let sample: Vec<f64> = ok.iter().filter_map(|r| r.coefficient(target, source, lag)).collect();
                    let r2 = if sample.len() >= 3 { filliben_coefficient(&sample).ok() } else { None };
                    filliben.push(FillibenCell { n_s, target, source, lag, count: sample.len(), r2 });
                }
            }
        }
        let mut histogram: Vec<(usize, usize)> = Vec::new();
        for order in ok.iter().filter_map(|r| r.order) {
            match histogram.iter_mut().find(|(o, _)| *o == order) {
                Some(entry) => entry.1 += 1,
                None => histogram.push((order, 1)),
            }
        }
        histogram.sort();
        lengths.push(LengthSummary {
            n_s,
            effective: ok.len(),
            failed: at.len() - ok.len(),
            redraws: at.iter().map(|r| r.redraws).sum(),
            order_histogram: histogram,
        });
    }
    Ok(MonteCarloOutcome { config, records, rates, filliben, lengths })
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<()> {
    let err = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(err)?;
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Shortest round-trip form, exponent notation for very large or small values.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Serialize)]
struct ConfigEcho {
    system: String,
    dim: usize,
    true_graph: Vec<[usize; 3]>,
    kernel: KernelReport,
    solver: String,
    centering: &'static str,
    order: String,
    p_max: usize,
    criterion: String,
    alpha: f64,
    lengths: Vec<usize>,
    replications: usize,
    seed: u64,
    burn_in: usize,
    max_attempts: usize,
}

#[derive(Serialize)]
struct RateRow {
    n_s: usize,
    target: usize,
    source: usize,
    label: &'static str,
    rejections: usize,
    count: usize,
    rate: f64,
    wilson_low: f64,
    wilson_high: f64,
}

#[derive(Serialize)]
struct Summary {
    schema_version: u32,
    command: &'static str,
    config: ConfigEcho,
    lengths: Vec<LengthSummary>,
    rates: Vec<RateRow>,
    filliben: Vec<FillibenCell>,
    files: Vec<String>,
}

pub const REPLICATIONS_FILE: &str = "replications.csv";
pub const RATES_FILE: &str = "rates.csv";
pub const COEFFICIENTS_FILE: &str = "coefficients.csv";
pub const FILLIBEN_FILE: &str = "filliben.csv";
pub const ORDERS_FILE: &str = "orders.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Writes the log, rate table, plot-data CSVs and summary into `dir`.
/// Channels are 1-based in every file.
pub fn write_outputs(outcome: &MonteCarloOutcome, dir: &Path) -> CliResult<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let cfg = &outcome.config;
    let d = cfg.system.dim;
    let mut written = Vec::new();

    let label = |t: usize, s: usize| if cfg.system.causes(t, s) { "TP" } else { "FP" };
    let mut log = Vec::new();
    for r in &outcome.records {
        let common = [r.n_s.to_string(), r.replication.to_string(), r.redraws.to_string()];
        match &r.failure {
            Some(msg) => {
                let mut row = common.to_vec();
                row.extend(["failed".into(), opt(r.order)]);
                row.extend(std::iter::repeat_n(String::new(), 6));
                row.push(msg.clone());
                log.push(row);
            }
            None => {
                for p in &r.pairs {
                    let mut row = common.to_vec();
                    row.extend([
                        "ok".into(),
                        opt(r.order),
                        (p.target + 1).to_string(),
                        (p.source + 1).to_string(),
                        label(p.target, p.source).into(),
                        num(p.statistic),
                        num(p.p_value),
                        (p.reject as u8).to_string(),
                        String::new(),
                    ]);
                    log.push(row);
                }
            }
        }
    }
    let path = dir.join(REPLICATIONS_FILE);
    write_csv(
        &path,
        &[
            "n_s", "replication", "redraws", "status", "order", "target", "source", "label", "statistic", "p_value",
            "reject", "message",
        ],
        log,
    )?;
    written.push(path);

    let path = dir.join(RATES_FILE);
    write_csv(
        &path,
        &["n_s", "target", "source", "label", "rejections", "count", "rate", "wilson_low", "wilson_high"],
        outcome.rates.iter().map(|c| {
            vec![
                c.n_s.to_string(),
                (c.target + 1).to_string(),
                (c.source + 1).to_string(),
                c.label().into(),
                c.rejections.to_string(),
                c.count.to_string(),
                num(c.rate),
                num(c.wilson_low),
                num(c.wilson_high),
            ]
        }),
    )?;
    written.push(path);

    let path = dir.join(COEFFICIENTS_FILE);
    write_csv(
        &path,
        &["n_s", "replication", "target", "source", "lag", "value"],
        outcome.records.iter().filter(|r| r.is_ok()).flat_map(|r| {
            r.coefficients.iter().map(move |&(t, s, k, v)| {
                vec![
                    r.n_s.to_string(),
                    r.replication.to_string(),
                    (t + 1).to_string(),
                    (s + 1).to_string(),
                    k.to_string(),
                    num(v),
                ]
            })
        }),
    )?;
    written.push(path);

    let path = dir.join(FILLIBEN_FILE);
    write_csv(
        &path,
        &["n_s", "target", "source", "lag", "count", "r2"],
        outcome.filliben.iter().map(|c| {
            vec![
                c.n_s.to_string(),
                (c.target + 1).to_string(),
                (c.source + 1).to_string(),
                c.lag.to_string(),
                c.count.to_string(),
                c.r2.map(num).unwrap_or_default(),
            ]
        }),
    )?;
    written.push(path);

    let path = dir.join(ORDERS_FILE);
    write_csv(
        &path,
        &["n_s", "order", "count"],
        outcome.lengths.iter().flat_map(|l| {
            l.order_histogram.iter().map(move |&(o, c)| vec![l.n_s.to_string(), o.to_string(), c.to_string()])
        }),
    )?;
    written.push(path);

    let path = dir.join(SUMMARY_FILE);
    let files: Vec<String> = written
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        command: "montecarlo",
        config: ConfigEcho {
            system: cfg.system.name.clone(),
            dim: d,
            true_graph: cfg.system.true_graph().iter().map(|e| [e.target + 1, e.source + 1, e.lag]).collect(),
            kernel: KernelReport { family: "poly", offset: cfg.fit.kernel.offset(), degree: cfg.fit.kernel.degree() },
            solver: cfg.fit.solver.to_string(),
            centering: centering_name(cfg.fit.centering),
            order: cfg.fit.order.to_string(),
            p_max: cfg.fit.p_max,
            criterion: cfg.fit.criterion.to_string(),
            alpha: cfg.alpha,
            lengths: cfg.lengths.clone(),
            replications: cfg.replications,
            seed: cfg.seed,
            burn_in: cfg.burn_in,
            max_attempts: cfg.max_attempts,
        },
        lengths: outcome.lengths.clone(),
        rates: outcome
            .rates
            .iter()
            .map(|c| RateRow {
                n_s: c.n_s,
                target: c.target + 1,
                source: c.source + 1,
                label: c.label(),
                rejections: c.rejections,
                count: c.count,
                rate: c.rate,
                wilson_low: c.wilson_low,
                wilson_high: c.wilson_high,
            })
            .collect(),
        filliben: outcome
            .filliben
            .iter()
            .map(|c| FillibenCell { target: c.target + 1, source: c.source + 1, ..c.clone() })
            .collect(),
        files,
    };
    let file = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut bw = std::io::BufWriter::new(file);
    write_json(&mut bw, &summary)
        .and_then(|_| bw.flush())
        .map_err(|e| CliError::io(&path, e))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use kgc_core::builtin_system;

    #[test]
    fn wilson_reference_values() {
        // 8 of 10 at 95%: (0.4902, 0.9433).
        let (lo, hi) = wilson_interval(8, 10, 1.959_963_984_540_054);
        assert!((lo - 0.4902).abs() < 1e-4 && (hi - 0.9433).abs() < 1e-4, "{lo} {hi}");
        let (lo, hi) = wilson_interval(0, 50, 1.96);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.08);
        assert_eq!(wilson_interval(0, 0, 1.96), (0.0, 1.0));
    }

    #[test]
    fn smoke_run_single_replication() {
        let mut cfg = ExperimentConfig::new(builtin_system("example1").unwrap());
        cfg.replications = 1;
        cfg.lengths = vec![64, 256];
        cfg.burn_in = 500;
        cfg.workers = Some(1);
        let out = run(&cfg).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.rates.len(), 4);
        for c in &out.rates {
            assert!(c.rate == 0.0 || c.rate == 1.0);
            assert_eq!(c.count, 1);
            assert_eq!(c.causal, (c.target, c.source) == (0, 1));
        }
    }

    #[test]
    fn rates_match_the_log() {
        let mut cfg = ExperimentConfig::new(builtin_system("example4").unwrap());
        cfg.replications = 20;
        cfg.lengths = vec![128];
        cfg.burn_in = 300;
        let out = run(&cfg).unwrap();
        for c in &out.rates {
            let ok: Vec<_> = out.records_at(128).filter(|r| r.is_ok()).collect();
            let k = ok.iter().filter(|r| r.pair(c.target, c.source).unwrap().reject).count();
            assert_eq!((c.rejections, c.count), (k, ok.len()));
        }
        assert_eq!(out.lengths[0].effective + out.lengths[0].failed, 20);
    }

    #[test]
    fn config_validation() {
        let base = ExperimentConfig::new(builtin_system("example1").unwrap());
        let mut c = base.clone();
        c.lengths = vec![512, 128];
        assert_eq!(c.validate().unwrap_err().exit_code(), 1);
        let mut c = base.clone();
        c.alpha = 1.0;
        assert!(c.validate().is_err());
        let mut c = base;
        c.replications = 0;
        assert!(c.validate().is_err());
    }
}
