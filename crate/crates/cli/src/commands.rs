//! Subcommand definitions and handlers.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use kgc_core::kernels::{estimate_lagged_kernels_with, kcf_matrices};
use kgc_core::simulate::{example2, Term, TermKind};
use kgc_core::{
    builtin_system, residual_kcf, simulate, Criterion, LaggedKernelSet64, Panel64, ResidualLagForm,
    SimulationConfig, Solver, SystemSpec,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::{output_dir, read_panel, write_json, write_panel, Sink};
use crate::montecarlo::{self, ExperimentConfig, FULL_SCALE_REPLICATIONS};
use crate::pipeline::{
    fit_panel, fit_report, gc_report, whiteness, ModelHeader, WhitenessSummary, SCHEMA_VERSION,
};
use crate::settings::{
    merge, merge_with, parse_centering, parse_lengths, ConfigFile, FitSettings, KernelArg, OrderChoice,
};

#[derive(Debug, Parser)]
#[command(name = "kgc", version, about = "Kernelized Granger causality: simulate, fit, test, diagnose")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a benchmark or user-defined system to a panel CSV.
    Simulate(SimulateArgs),
    /// Fit a feature-space VAR and report coefficients, Σ, Γ and diagnostics.
    Fit(FitArgs),
    /// Wald tests for every ordered channel pair.
    Gctest(GcTestArgs),
    /// Kernel and residual kernel correlation tables.
    Diagnose(DiagnoseArgs),
    /// Replicated detection-rate experiment.
    Montecarlo(MonteCarloArgs),
}

#[derive(Debug, Args)]
pub struct SystemArgs {
    /// Builtin system: example1 … example5.
    #[arg(long)]
    pub system: Option<String>,
    /// TOML or JSON file describing a custom system.
    #[arg(long)]
    pub system_file: Option<PathBuf>,
    /// Oscillator frequency for example2, cycles per sample.
    #[arg(long)]
    pub frequency: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Flat TOML file with defaults for any flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub system: SystemArgs,
    /// Number of recorded samples.
    #[arg(long)]
    pub ns: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replication: Option<u64>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    /// Output file, or `-` for standard output.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Output directory (default: $KGC_OUTPUT_DIR, else the working directory).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimationArgs {
    /// Kernel `poly:c:d`, or linear | quadratic | quartic.
    #[arg(long)]
    pub kernel: Option<KernelArg>,
    /// tls | ls.
    #[arg(long)]
    pub solver: Option<Solver>,
    /// none | feature-mean.
    #[arg(long, value_parser = parse_centering)]
    pub centering: Option<kgc_core::Centering>,
    /// Model order: a positive integer or `auto`.
    #[arg(long)]
    pub order: Option<OrderChoice>,
    /// Largest order tried by `--order auto`.
    #[arg(long)]
    pub p_max: Option<usize>,
    /// hq | aic.
    #[arg(long)]
    pub criterion: Option<Criterion>,
    /// Residual diagnostic lag depth (default min(20, n_s/8)).
    #[arg(long)]
    pub lags: Option<usize>,
    /// Cap on the equilibrated Gram condition number.
    #[arg(long)]
    pub condition_cap: Option<f64>,
    /// Residual lag expression: exact | quadratic.
    #[arg(long, value_parser = parse_residual_form)]
    pub residual_form: Option<ResidualLagForm>,
}

pub fn parse_residual_form(s: &str) -> Result<ResidualLagForm, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "exact" => Ok(ResidualLagForm::Exact),
        "quadratic" | "quadratic-only" => Ok(ResidualLagForm::QuadraticOnly),
        _ => Err(format!("unknown residual form '{s}' (expected exact or quadratic)")),
    }
}

impl EstimationArgs {
    fn resolve(&self, cfg: &ConfigFile, defaults: FitSettings) -> CliResult<FitSettings> {
        let lags = merge(self.lags, &cfg.lags, "lags")?.or(defaults.lags);
        Ok(FitSettings {
            kernel: merge(self.kernel, &cfg.kernel, "kernel")?.map_or(defaults.kernel, |k| k.0),
            solver: merge(self.solver, &cfg.solver, "solver")?.unwrap_or(defaults.solver),
            centering: merge_with(self.centering, &cfg.centering, "centering", parse_centering)?
                .unwrap_or(defaults.centering),
            order: merge(self.order, &cfg.order, "order")?.unwrap_or(defaults.order),
            p_max: merge(self.p_max, &cfg.p_max, "p_max")?.unwrap_or(defaults.p_max),
            criterion: merge(self.criterion, &cfg.criterion, "criterion")?.unwrap_or(defaults.criterion),
            condition_cap: merge(self.condition_cap, &cfg.condition_cap, "condition_cap")?
                .unwrap_or(defaults.condition_cap),
            lags,
        })
    }

    fn residual_form(&self, cfg: &ConfigFile) -> CliResult<ResidualLagForm> {
        Ok(merge_with(self.residual_form, &cfg.residual_form, "residual_form", parse_residual_form)?
            .unwrap_or_default())
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Panel CSV (header line of channel names).
    #[arg(long, short)]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub estimation: EstimationArgs,
    /// Significance level for the whiteness band and tests.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Output file, or `-` for standard output.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub type GcTestArgs = FitArgs;

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, short)]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub estimation: EstimationArgs,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MonteCarloArgs {
    /// Experiment config file (flat TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub system: SystemArgs,
    #[command(flatten)]
    pub estimation: EstimationArgs,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Comma-separated series lengths, ascending.
    #[arg(long)]
    pub lengths: Option<String>,
    #[arg(long)]
    pub replications: Option<usize>,
    /// Use 10,000 replications per length.
    #[arg(long)]
    pub full_scale: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Redraws allowed after a divergent trajectory.
    #[arg(long)]
    pub max_attempts: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Custom system file: 1-based channels.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemFile {
    name: String,
    dim: usize,
    terms: Vec<TermFile>,
}

#[derive(Debug, Deserialize)]
struct TermFile {
    target: usize,
    source: Option<usize>,
    lag: usize,
    coefficient: f64,
    #[serde(default = "TermFile::default_kind")]
    kind: String,
    power: Option<u32>,
}

impl TermFile {
    fn default_kind() -> String {
        "power".into()
    }
}

fn load_system_file(path: &Path) -> CliResult<SystemSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let bad = |e: String| CliError::Usage(format!("system file {}: {e}", path.display()));
    let file: SystemFile = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?
    } else {
        toml::from_str(&text).map_err(|e| bad(e.to_string()))?
    };
    let zero_based = |c: usize, what: &str| {
        c.checked_sub(1).ok_or_else(|| bad(format!("{what} channels are numbered from 1")))
    };
    let terms = file
        .terms
        .iter()
        .map(|t| {
            let target = zero_based(t.target, "target")?;
            let source = zero_based(t.source.unwrap_or(t.target), "source")?;
            let kind = match t.kind.as_str() {
                "power" => TermKind::Power { power: t.power.unwrap_or(1) },
                "bump_map" | "bump" => TermKind::BumpMap,
                other => return Err(bad(format!("unknown term kind '{other}'"))),
            };
            Ok(Term { target, source, lag: t.lag, coefficient: t.coefficient, kind })
        })
        .collect::<CliResult<Vec<Term>>>()?;
    Ok(SystemSpec::custom(file.name, file.dim, terms)?)
}

fn resolve_system(args: &SystemArgs, cfg: &ConfigFile) -> CliResult<SystemSpec> {
    let name = args.system.clone().or_else(|| cfg.system.clone());
    let file = args.system_file.clone().or_else(|| cfg.system_file.clone());
    let frequency = merge(args.frequency, &cfg.frequency, "frequency")?;
    let spec = match (name, file) {
        (Some(_), Some(_)) => return Err(CliError::Usage("give either --system or --system-file, not both".into())),
        (None, None) => return Err(CliError::Usage("a system is required (--system or --system-file)".into())),
        (None, Some(f)) => load_system_file(&f)?,
        (Some(n), None) => builtin_system(&n)?,
    };
    match (frequency, &spec.rule) {
        (None, _) => Ok(spec),
        (Some(f), kgc_core::simulate::SystemRule::Example2 { r, c, .. }) => {
            if !(f > 0.0 && f < 0.5) {
                return Err(CliError::Usage(format!("frequency must lie in (0, 0.5), got {f}")));
            }
            Ok(example2(*r, f, *c))
        }
        (Some(_), _) => Err(CliError::Usage("--frequency applies to example2 only".into())),
    }
}

fn alpha(flag: Option<f64>, cfg: &ConfigFile) -> CliResult<f64> {
    let a = merge(flag, &cfg.alpha, "alpha")?.unwrap_or(0.01);
    if a > 0.0 && a <= 1.0 {
        Ok(a)
    } else {
        Err(CliError::Usage(format!("alpha must lie in (0, 1], got {a}")))
    }
}

fn input_path(flag: &Option<PathBuf>, cfg: &ConfigFile) -> CliResult<PathBuf> {
    flag.clone()
        .or_else(|| cfg.input.clone())
        .ok_or_else(|| CliError::Usage("an input panel is required (--input)".into()))
}

fn announce(what: &str, path: &Path) {
    eprintln!("wrote {what}: {}", path.display());
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    let cfg = ConfigFile::load_opt(args.config.as_deref())?;
    let spec = resolve_system(&args.system, &cfg)?;
    let n_s = merge(args.ns, &cfg.ns, "ns")?.unwrap_or(1024);
    let seed = merge(args.seed, &cfg.seed, "seed")?.unwrap_or(1);
    let replication = merge(args.replication, &cfg.replication, "replication")?.unwrap_or(0);
    let burn_in = merge(args.burn_in, &cfg.burn_in, "burn_in")?.unwrap_or(kgc_core::simulate::DEFAULT_BURN_IN);
    let sim = SimulationConfig::new(n_s, seed).replication(replication).burn_in(burn_in);
    let panel: Panel64 = simulate(&spec, &sim)?;
    let default_name = format!("{}_ns{n_s}_seed{seed}_rep{replication}.csv", spec.name);
    let sink = Sink::resolve(
        args.output.clone().or_else(|| cfg.output.clone()),
        args.out_dir.clone().or_else(|| cfg.out_dir.clone()),
        &default_name,
    );
    sink.write_with(|w| write_panel(&panel, w))?;
    eprintln!(
        "system={} dim={} n_s={n_s} seed={seed} replication={replication} burn_in={burn_in} -> {}",
        spec.name,
        spec.dim,
        sink.describe()
    );
    Ok(())
}

fn load_for_fit(
    config: &Option<PathBuf>,
    input: &Option<PathBuf>,
    est: &EstimationArgs,
) -> CliResult<(ConfigFile, PathBuf, Panel64, FitSettings)> {
    let cfg = ConfigFile::load_opt(config.as_deref())?;
    let path = input_path(input, &cfg)?;
    let settings = est.resolve(&cfg, FitSettings::default())?;
    if settings.order == OrderChoice::True {
        return Err(CliError::Usage("order 'true' is only meaningful for montecarlo".into()));
    }
    let panel = read_panel(&path)?;
    Ok((cfg, path, panel, settings))
}

pub fn cmd_fit(args: &FitArgs) -> CliResult<()> {
    let (cfg, path, panel, settings) = load_for_fit(&args.config, &args.input, &args.estimation)?;
    let alpha = alpha(args.alpha, &cfg)?;
    let form = args.estimation.residual_form(&cfg)?;
    let fitted = fit_panel(&panel, &settings, None)?;
    let white = whiteness(&fitted.model, alpha.min(0.5), form)?;
    let report = fit_report(&path.display().to_string(), &fitted, &settings, white.as_ref());
    let sink = Sink::resolve(
        args.output.clone().or_else(|| cfg.output.clone()),
        args.out_dir.clone().or_else(|| cfg.out_dir.clone()),
        "fit.json",
    );
    sink.write_with(|w| write_json(w, &report))?;
    if let Sink::File(p) = &sink {
        announce("fit report", p);
    }
    Ok(())
}

pub fn cmd_gctest(args: &GcTestArgs) -> CliResult<()> {
    let (cfg, path, panel, settings) = load_for_fit(&args.config, &args.input, &args.estimation)?;
    let alpha = alpha(args.alpha, &cfg)?;
    if panel.dim() < 2 {
        return Err(CliError::Data(format!(
            "{}: causality testing needs at least two channels; the panel has one",
            path.display()
        )));
    }
    let fitted = fit_panel(&panel, &settings, None)?;
    let report = gc_report(&path.display().to_string(), &fitted, alpha)?;
    let sink = Sink::resolve(
        args.output.clone().or_else(|| cfg.output.clone()),
        args.out_dir.clone().or_else(|| cfg.out_dir.clone()),
        "gctest.json",
    );
    sink.write_with(|w| write_json(w, &report))?;
    if let Sink::File(p) = &sink {
        announce("causality tests", p);
    }
    Ok(())
}

#[derive(Serialize)]
struct DiagnoseSummary {
    schema_version: u32,
    command: &'static str,
    input: String,
    #[serde(flatten)]
    header: ModelHeader,
    max_lag: usize,
    threshold: f64,
    kcf_max_abs_off_zero: f64,
    whiteness: Option<WhitenessSummary>,
    files: Vec<String>,
    warnings: Vec<String>,
}

fn write_kcf_table(path: &Path, set: &LaggedKernelSet64, max_lag: usize, threshold: f64) -> CliResult<()> {
    let names = set.names();
    let d = set.dim();
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "tau,target,source,target_name,source_name,value,lower,upper")?;
        for tau in -(max_lag as isize)..=max_lag as isize {
            let m = set.at(tau);
            for i in 0..d {
                for j in 0..d {
                    writeln!(
                        w,
                        "{tau},{},{},{},{},{:?},{:?},{:?}",
                        i + 1,
                        j + 1,
                        names[i],
                        names[j],
                        m[(i, j)],
                        -threshold,
                        threshold
                    )?;
                }
            }
        }
        w.flush()
    };
    body().map_err(|e| CliError::io(path, e))
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> CliResult<()> {
    let cfg = ConfigFile::load_opt(args.config.as_deref())?;
    let path = input_path(&args.input, &cfg)?;
    let settings = args.estimation.resolve(&cfg, FitSettings::default())?;
    if settings.order == OrderChoice::True {
        return Err(CliError::Usage("order 'true' is only meaningful for montecarlo".into()));
    }
    let alpha = alpha(args.alpha, &cfg)?;
    if alpha >= 1.0 {
        return Err(CliError::Usage("diagnose needs alpha below 1".into()));
    }
    let form = args.estimation.residual_form(&cfg)?;
    let panel = read_panel(&path)?;
    let n = panel.len();
    let max_lag = settings.lags.unwrap_or_else(|| kgc_core::kvar::default_diagnostic_lag(n));
    if max_lag == 0 {
        return Err(CliError::Usage("diagnostic lag depth must be at least 1".into()));
    }
    if max_lag >= n {
        return Err(CliError::Usage(format!("lag depth {max_lag} must be below the series length {n}")));
    }
    let fit_settings = FitSettings { lags: Some(max_lag), ..settings };
    let fitted = fit_panel(&panel, &fit_settings, None)?;
    let model = &fitted.model;
    if model.diagnostic_lag < max_lag {
        return Err(CliError::Usage(format!(
            "lag depth {max_lag} plus order {} must stay below the series length {n}",
            model.order
        )));
    }
    let threshold = kgc_core::dist::normal_quantile(1.0 - alpha / 2.0)? / (n as f64).sqrt();

    let kset = estimate_lagged_kernels_with(&panel, &settings.kernel, max_lag, settings.centering)?;
    let kcf = kcf_matrices(&kset)?;
    let rkcf = residual_kcf(&model.residual_lags(form)?)?;
    let white = whiteness(model, alpha, form)?;

    let dir = output_dir(args.out_dir.clone().or_else(|| cfg.out_dir.clone()));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let kcf_path = dir.join("kcf.csv");
    let rkcf_path = dir.join("residual_kcf.csv");
    write_kcf_table(&kcf_path, &kcf, max_lag, threshold)?;
    write_kcf_table(&rkcf_path, &rkcf, max_lag, threshold)?;

    let mut kcf_max = 0.0f64;
    for tau in (-(max_lag as isize)..=max_lag as isize).filter(|&t| t != 0) {
        kcf_max = kcf_max.max(kcf.at(tau).amax());
    }
    let mut warnings = model.warnings.clone();
    if white.is_none() {
        warnings.push(format!("portmanteau test skipped: lag depth {max_lag} does not exceed order {}", model.order));
    }
    let summary = DiagnoseSummary {
        schema_version: SCHEMA_VERSION,
        command: "diagnose",
        input: path.display().to_string(),
        header: ModelHeader::of(&fitted),
        max_lag,
        threshold,
        kcf_max_abs_off_zero: kcf_max,
        whiteness: white.as_ref().map(WhitenessSummary::from),
        files: vec!["kcf.csv".into(), "residual_kcf.csv".into()],
        warnings,
    };
    let summary_path = dir.join("diagnose.json");
    Sink::File(summary_path.clone()).write_with(|w| write_json(w, &summary))?;
    announce("kernel correlations", &kcf_path);
    announce("residual kernel correlations", &rkcf_path);
    announce("diagnostic summary", &summary_path);
    Ok(())
}

/// Builds the experiment from a config file and overriding flags.
pub fn experiment_config(args: &MonteCarloArgs) -> CliResult<(ExperimentConfig, PathBuf)> {
    let cfg = ConfigFile::load_opt(args.config.as_deref())?;
    let system = resolve_system(&args.system, &cfg)?;
    let mut exp = ExperimentConfig::new(system);
    exp.fit = args.estimation.resolve(&cfg, exp.fit)?;
    exp.alpha = merge(args.alpha, &cfg.alpha, "alpha")?.unwrap_or(exp.alpha);
    let flag_lengths = args.lengths.as_deref().map(parse_lengths).transpose().map_err(CliError::Usage)?;
    if let Some(l) = merge_with(flag_lengths, &cfg.lengths, "lengths", parse_lengths)? {
        exp.lengths = l;
    }
    exp.replications = merge(args.replications, &cfg.replications, "replications")?.unwrap_or(exp.replications);
    if args.full_scale {
        exp.replications = FULL_SCALE_REPLICATIONS;
    }
    exp.seed = merge(args.seed, &cfg.seed, "seed")?.unwrap_or(exp.seed);
    exp.burn_in = merge(args.burn_in, &cfg.burn_in, "burn_in")?.unwrap_or(exp.burn_in);
    exp.workers = merge(args.workers, &cfg.workers, "workers")?;
    exp.max_attempts = merge(args.max_attempts, &cfg.max_attempts, "max_attempts")?.unwrap_or(exp.max_attempts);
    exp.validate()?;
    let dir = output_dir(args.out_dir.clone().or_else(|| cfg.out_dir.clone()));
    Ok((exp, dir))
}

pub fn cmd_montecarlo(args: &MonteCarloArgs) -> CliResult<()> {
    let (exp, dir) = experiment_config(args)?;
    eprintln!(
        "montecarlo: system={} lengths={:?} replications={} seed={}",
        exp.system.name, exp.lengths, exp.replications, exp.seed
    );
    let outcome = montecarlo::run(&exp)?;
    let written = montecarlo::write_outputs(&outcome, &dir)?;
    for l in &outcome.lengths {
        if l.failed > 0 || l.redraws > 0 {
            eprintln!("n_s={}: {} failed replications, {} divergent redraws", l.n_s, l.failed, l.redraws);
        }
    }
    for p in &written {
        announce("output", p);
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Gctest(a) => cmd_gctest(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Montecarlo(a) => cmd_montecarlo(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("kgc: {e}");
            e.exit_code()
        }
    }
}
