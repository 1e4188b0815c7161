//! Option values shared by the subcommands and the flat TOML config file.
//!
//! Every flag has a config-file key of the same name (dashes become
//! underscores). Flags override file values, file values override defaults.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use kgc_core::{Centering, Criterion, KernelSpec64, Solver};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

/// Polynomial kernel given as `poly:c:d`, or `linear`, `quadratic`, `quartic`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelArg(pub KernelSpec64);

impl FromStr for KernelArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let spec = match s.trim().to_ascii_lowercase().as_str() {
            "linear" => KernelSpec64::linear(),
            "quadratic" => KernelSpec64::quadratic(),
            "quartic" => KernelSpec64::quartic(),
            other => {
                let parts: Vec<&str> = other.split(':').collect();
                let [kind, c, d] = parts[..] else {
                    return Err(format!("kernel '{s}' is not of the form poly:c:d"));
                };
                if kind != "poly" {
                    return Err(format!("unknown kernel family '{kind}' (only poly is supported)"));
                }
                let c: f64 = c.parse().map_err(|_| format!("kernel offset '{c}' is not a number"))?;
                let d: u32 = d.parse().map_err(|_| format!("kernel degree '{d}' is not a positive integer"))?;
                KernelSpec64::new(c, d).map_err(|e| e.to_string())?
            }
        };
        Ok(KernelArg(spec))
    }
}

impl std::fmt::Display for KernelArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "poly:{}:{}", self.0.offset(), self.0.degree())
    }
}

/// Model order: a fixed value, an information-criterion scan, or the
/// simulated system's true order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderChoice {
    Fixed(usize),
    Auto,
    True,
}

impl FromStr for OrderChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "auto" => Ok(OrderChoice::Auto),
            "true" => Ok(OrderChoice::True),
            n => match n.parse::<usize>() {
                Ok(0) | Err(_) => Err(format!("order '{s}' must be a positive integer, 'auto' or 'true'")),
                Ok(p) => Ok(OrderChoice::Fixed(p)),
            },
        }
    }
}

impl std::fmt::Display for OrderChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OrderChoice::Fixed(p) => write!(f, "{p}"),
            OrderChoice::Auto => f.write_str("auto"),
            OrderChoice::True => f.write_str("true"),
        }
    }
}

pub fn parse_centering(s: &str) -> Result<Centering, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "none" | "off" => Ok(Centering::None),
        "feature-mean" | "feature_mean" | "on" => Ok(Centering::FeatureMean),
        _ => Err(format!("unknown centering '{s}' (expected none or feature-mean)")),
    }
}

pub fn centering_name(c: Centering) -> &'static str {
    match c {
        Centering::None => "none",
        Centering::FeatureMean => "feature-mean",
    }
}

/// Comma-separated list of series lengths.
pub fn parse_lengths(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|_| format!("length '{v}' is not a positive integer")))
        .collect()
}

/// A value written either as a TOML scalar or as a string.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Loose {
    Int(i64),
    Float(f64),
    Bool(bool),
    Text(String),
    List(Vec<i64>),
}

impl Loose {
    fn text(&self) -> String {
        match self {
            Loose::Int(v) => v.to_string(),
            Loose::Float(v) => v.to_string(),
            Loose::Bool(v) => v.to_string(),
            Loose::Text(v) => v.clone(),
            Loose::List(v) => v.iter().map(i64::to_string).collect::<Vec<_>>().join(","),
        }
    }
}

/// Parsed config file: flat keys only.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub system: Option<String>,
    pub system_file: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub kernel: Option<Loose>,
    pub solver: Option<Loose>,
    pub centering: Option<Loose>,
    pub order: Option<Loose>,
    pub p_max: Option<Loose>,
    pub criterion: Option<Loose>,
    pub alpha: Option<Loose>,
    pub lags: Option<Loose>,
    pub condition_cap: Option<Loose>,
    pub ns: Option<Loose>,
    pub lengths: Option<Loose>,
    pub replications: Option<Loose>,
    pub replication: Option<Loose>,
    pub seed: Option<Loose>,
    pub burn_in: Option<Loose>,
    pub workers: Option<Loose>,
    pub max_attempts: Option<Loose>,
    pub frequency: Option<Loose>,
    pub residual_form: Option<Loose>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn load_opt(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

/// Flag value if set, else the config value parsed with `FromStr`.
pub fn merge<T: FromStr>(flag: Option<T>, file: &Option<Loose>, key: &str) -> CliResult<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if flag.is_some() {
        return Ok(flag);
    }
    match file {
        None => Ok(None),
        Some(v) => v
            .text()
            .parse::<T>()
            .map(Some)
            .map_err(|e| CliError::Usage(format!("config key '{key}': {e}"))),
    }
}

/// As [`merge`] with a custom parser.
pub fn merge_with<T>(
    flag: Option<T>,
    file: &Option<Loose>,
    key: &str,
    parse: impl Fn(&str) -> Result<T, String>,
) -> CliResult<Option<T>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match file {
        None => Ok(None),
        Some(v) => parse(&v.text()).map(Some).map_err(|e| CliError::Usage(format!("config key '{key}': {e}"))),
    }
}

/// Estimation settings shared by `fit`, `gctest`, `diagnose` and `montecarlo`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitSettings {
    pub kernel: KernelSpec64,
    pub solver: Solver,
    pub centering: Centering,
    pub order: OrderChoice,
    pub p_max: usize,
    pub criterion: Criterion,
    pub condition_cap: f64,
    /// Diagnostic lag depth; `None` picks `min(20, ⌊n_s/8⌋)`.
    pub lags: Option<usize>,
}

pub const DEFAULT_P_MAX: usize = 6;

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            kernel: KernelSpec64::quadratic(),
            solver: Solver::Tls,
            centering: Centering::None,
            order: OrderChoice::Fixed(1),
            p_max: DEFAULT_P_MAX,
            criterion: Criterion::Hq,
            condition_cap: kgc_core::kvar::DEFAULT_CONDITION_CAP,
            lags: None,
        }
    }
}
