//! Seeded simulation of lag-coupled nonlinear systems.
//!
//! A system is a list of additive terms: each channel at time `n` is the sum
//! of its terms evaluated on lagged values, plus a unit-variance Gaussian
//! innovation. The five benchmark systems are expressed the same way.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{KgcError, Result};
use crate::panel::TimeSeriesPanel;
use crate::scalar::Scalar;

/// Magnitude beyond which a trajectory is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

/// Samples discarded before recording by default.
pub const DEFAULT_BURN_IN: usize = 10_000;

/// Nonlinearity applied to the lagged source value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TermKind {
    /// `x^power`.
    Power { power: u32 },
    /// `x (1 − x²) e^{−x²}`.
    BumpMap,
}

impl TermKind {
    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            TermKind::Power { power } => x.powi(power as i32),
            TermKind::BumpMap => {
                let x2 = x * x;
                x * (T::one() - x2) * (-x2).exp()
            }
        }
    }
}

/// `coefficient · kind(x_source(n − lag))` added to `x_target(n)`; 0-based channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub target: usize,
    pub source: usize,
    pub lag: usize,
    pub coefficient: f64,
    #[serde(flatten)]
    pub kind: TermKind,
}

impl Term {
    pub fn linear(target: usize, source: usize, lag: usize, coefficient: f64) -> Self {
        Self { target, source, lag, coefficient, kind: TermKind::Power { power: 1 } }
    }

    pub fn power(target: usize, source: usize, lag: usize, coefficient: f64, power: u32) -> Self {
        Self { target, source, lag, coefficient, kind: TermKind::Power { power } }
    }

    pub fn bump(target: usize, lag: usize, coefficient: f64) -> Self {
        Self { target, source: target, lag, coefficient, kind: TermKind::BumpMap }
    }
}

/// Directed ground-truth coupling `target ← source` at `lag` (0-based channels).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub target: usize,
    pub source: usize,
    pub lag: usize,
}

/// Which system a spec came from, with its defining parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SystemRule {
    Example1 { a: f64, b: f64, c: f64 },
    Example2 { r: f64, f: f64, c: f64 },
    Example3 { c1: f64, c2: f64 },
    Example4 { c: f64 },
    Example5 { c1: f64, c2: f64 },
    Custom,
}

/// A simulated system: dimension, additive terms and ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub name: String,
    pub dim: usize,
    pub rule: SystemRule,
    pub terms: Vec<Term>,
}

impl SystemSpec {
    /// Validates and builds a user-defined system.
    pub fn custom(name: impl Into<String>, dim: usize, terms: Vec<Term>) -> Result<Self> {
        let spec = Self { name: name.into(), dim, rule: SystemRule::Custom, terms };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(KgcError::Parameter(format!("system '{}' has no channels", self.name)));
        }
        for t in &self.terms {
            if t.target >= self.dim || t.source >= self.dim {
                return Err(KgcError::Parameter(format!(
                    "system '{}': term references channel outside 0..{}",
                    self.name, self.dim
                )));
            }
            if t.lag == 0 {
                return Err(KgcError::Parameter(format!("system '{}': term lags must be at least 1", self.name)));
            }
            if !t.coefficient.is_finite() {
                return Err(KgcError::Parameter(format!("system '{}': non-finite coefficient", self.name)));
            }
            if let TermKind::Power { power: 0 } = t.kind {
                return Err(KgcError::Parameter(format!("system '{}': power must be at least 1", self.name)));
            }
        }
        Ok(())
    }

    pub fn max_lag(&self) -> usize {
        self.terms.iter().map(|t| t.lag).max().unwrap_or(0)
    }

    /// Cross-channel couplings present in the update rule.
    pub fn true_graph(&self) -> Vec<Edge> {
        let mut edges: Vec<Edge> = self
            .terms
            .iter()
            .filter(|t| t.source != t.target && t.coefficient != 0.0)
            .map(|t| Edge { target: t.target, source: t.source, lag: t.lag })
            .collect();
        edges.sort();
        edges.dedup();
        edges
    }

    /// True when some coupling runs from `source` to `target` at any lag.
    pub fn causes(&self, target: usize, source: usize) -> bool {
        self.true_graph().iter().any(|e| e.target == target && e.source == source)
    }

    /// Lag order implied by the update rule.
    pub fn true_order(&self) -> usize {
        self.max_lag().max(1)
    }
}

/// Quadratic coupling from channel 2 into channel 1 (defaults 0.2, 0.6, 0.7).
pub fn example1(a: f64, b: f64, c: f64) -> SystemSpec {
    SystemSpec {
        name: "example1".into(),
        dim: 2,
        rule: SystemRule::Example1 { a, b, c },
        terms: vec![Term::linear(0, 0, 1, a), Term::power(0, 1, 1, c, 2), Term::linear(1, 1, 1, b)],
    }
}

/// Resonant oscillator (pole radius `r`, frequency `f` cycles/sample)
/// driving a low-pass channel through a squared term.
pub fn example2(r: f64, f: f64, c: f64) -> SystemSpec {
    let w = 2.0 * std::f64::consts::PI * f;
    SystemSpec {
        name: "example2".into(),
        dim: 2,
        rule: SystemRule::Example2 { r, f, c },
        terms: vec![
            Term::linear(0, 0, 1, 2.0 * r * w.cos()),
            Term::linear(0, 0, 2, -r * r),
            Term::linear(1, 1, 1, -0.9),
            Term::power(1, 0, 1, c, 2),
        ],
    }
}

/// Chain of three bump maps, `1 → 2` squared and `2 → 3` to the fourth power.
pub fn example3(c1: f64, c2: f64) -> SystemSpec {
    SystemSpec {
        name: "example3".into(),
        dim: 3,
        rule: SystemRule::Example3 { c1, c2 },
        terms: vec![
            Term::bump(0, 1, 3.4),
            Term::bump(1, 1, 3.4),
            Term::power(1, 0, 1, c1, 2),
            Term::bump(2, 1, 3.4),
            Term::power(2, 1, 1, c2, 4),
        ],
    }
}

/// Two bump maps with second-lag feedback and a lag-2 squared coupling `1 → 2`.
pub fn example4(c: f64) -> SystemSpec {
    SystemSpec {
        name: "example4".into(),
        dim: 2,
        rule: SystemRule::Example4 { c },
        terms: vec![
            Term::bump(0, 1, 3.4),
            Term::linear(0, 0, 2, 0.8),
            Term::bump(1, 1, 3.4),
            Term::linear(1, 1, 2, 0.5),
            Term::power(1, 0, 2, c, 2),
        ],
    }
}

/// Three channels with staggered lags: `1 → 2` at lag 2, `2 → 3` at lag 3.
pub fn example5(c1: f64, c2: f64) -> SystemSpec {
    SystemSpec {
        name: "example5".into(),
        dim: 3,
        rule: SystemRule::Example5 { c1, c2 },
        terms: vec![
            Term::bump(0, 3, 3.4),
            Term::linear(0, 0, 4, 0.4),
            Term::bump(1, 1, 3.4),
            Term::power(1, 0, 2, c1, 2),
            Term::bump(2, 2, 3.4),
            Term::power(2, 1, 3, c2, 2),
        ],
    }
}

/// Frequency used for the oscillator of `example2` when none is given.
pub const EXAMPLE2_DEFAULT_FREQUENCY: f64 = 0.1;

/// The five benchmark systems at their reference parameters.
pub fn builtin_systems() -> Vec<SystemSpec> {
    vec![
        example1(0.2, 0.6, 0.7),
        example2(0.99, EXAMPLE2_DEFAULT_FREQUENCY, 0.1),
        example3(0.7, 0.9),
        example4(0.5),
        example5(0.9, 0.4),
    ]
}

/// Looks up a builtin by name (`example1` … `example5`).
pub fn builtin_system(name: &str) -> Result<SystemSpec> {
    builtin_systems()
        .into_iter()
        .find(|s| s.name.eq_ignore_ascii_case(name))
        .ok_or_else(|| KgcError::Parameter(format!("unknown system '{name}' (expected example1..example5)")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimulationConfig {
    pub n_s: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub replication_index: u64,
    /// Redraw counter after a divergent trajectory; 0 for the first draw.
    pub attempt: u64,
}

impl SimulationConfig {
    pub fn new(n_s: usize, seed: u64) -> Self {
        Self { n_s, burn_in: DEFAULT_BURN_IN, seed, replication_index: 0, attempt: 0 }
    }

    pub fn replication(mut self, index: u64) -> Self {
        self.replication_index = index;
        self
    }

    pub fn burn_in(mut self, burn_in: usize) -> Self {
        self.burn_in = burn_in;
        self
    }

    pub fn attempt(mut self, attempt: u64) -> Self {
        self.attempt = attempt;
        self
    }

    /// Generator for this replication and attempt.
    pub fn rng(&self) -> ChaCha20Rng {
        if self.attempt == 0 {
            replication_rng(self.seed, self.replication_index)
        } else {
            ChaCha20Rng::from_seed(child_seed(self.seed, &[self.replication_index, self.attempt]))
        }
    }
}

/// SHA-256 of the master seed and a stream of indices, as a 32-byte RNG seed.
pub fn child_seed(master: u64, stream: &[u64]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"kgc-replication");
    h.update(master.to_le_bytes());
    for s in stream {
        h.update(s.to_le_bytes());
    }
    h.finalize().into()
}

/// Generator used for one replication.
pub fn replication_rng(master: u64, replication_index: u64) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(child_seed(master, &[replication_index]))
}

/// Simulates a system with Gaussian innovations from the replication stream.
pub fn simulate<T: Scalar>(spec: &SystemSpec, cfg: &SimulationConfig) -> Result<TimeSeriesPanel<T>> {
    let mut rng = cfg.rng();
    simulate_with(spec, cfg.n_s, cfg.burn_in, || rng.sample(StandardNormal))
}

/// Runs the recursion from a zero initial state with caller-supplied
/// innovations (drawn per step, channel by channel) and keeps the last
/// `n_s` samples after `burn_in`.
pub fn simulate_with<T: Scalar>(
    spec: &SystemSpec,
    n_s: usize,
    burn_in: usize,
    mut innovation: impl FnMut() -> f64,
) -> Result<TimeSeriesPanel<T>> {
    spec.validate()?;
    if n_s == 0 {
        return Err(KgcError::Parameter("simulation length must be at least 1".into()));
    }
    let d = spec.dim;
    let history = spec.max_lag();
    let total = burn_in + n_s;
    // Rows are time; the first `history` rows are the zero initial state.
    let mut x = vec![T::zero(); (history + total) * d];
    let terms: Vec<(Term, T)> = spec.terms.iter().map(|t| (*t, T::lit(t.coefficient))).collect();
    let limit = T::lit(DIVERGENCE_LIMIT);

    for step in 0..total {
        let row = history + step;
        for ch in 0..d {
            x[row * d + ch] = T::lit(innovation());
        }
        for (t, coef) in &terms {
            let past = x[(row - t.lag) * d + t.source];
            x[row * d + t.target] += *coef * t.kind.apply(past);
        }
        for ch in 0..d {
            let v = x[row * d + ch];
            if !(v.abs() <= limit) {
                return Err(KgcError::Divergence { step, channel: ch, value: v.as_f64() });
            }
        }
    }

    let start = history + burn_in;
    let channels = (0..d)
        .map(|ch| (start..start + n_s).map(|row| x[row * d + ch]).collect())
        .collect();
    TimeSeriesPanel::new(channels, (1..=d).map(|i| format!("x{i}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lag1_autocorrelation(x: &[f64]) -> f64 {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let c0: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
        let c1: f64 = x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
        c1 / c0
    }

    #[test]
    fn catalog_parameters_and_graphs() {
        let cat = builtin_systems();
        assert_eq!(cat.len(), 5);
        assert_eq!(cat[0].rule, SystemRule::Example1 { a: 0.2, b: 0.6, c: 0.7 });
        assert_eq!(cat[3].rule, SystemRule::Example4 { c: 0.5 });
        assert_eq!(cat[4].rule, SystemRule::Example5 { c1: 0.9, c2: 0.4 });
        assert_eq!(cat[2].rule, SystemRule::Example3 { c1: 0.7, c2: 0.9 });
        assert_eq!(cat[1].rule, SystemRule::Example2 { r: 0.99, f: 0.1, c: 0.1 });
        let e = |target, source, lag| Edge { target, source, lag };
        let expected = [
            vec![e(0, 1, 1)],
            vec![e(1, 0, 1)],
            vec![e(1, 0, 1), e(2, 1, 1)],
            vec![e(1, 0, 2)],
            vec![e(1, 0, 2), e(2, 1, 3)],
        ];
        for (spec, graph) in cat.iter().zip(expected) {
            assert_eq!(spec.true_graph(), graph, "{}", spec.name);
        }
        assert_eq!(cat[4].true_order(), 4);
        assert!(cat[0].causes(0, 1) && !cat[0].causes(1, 0));
    }

    #[test]
    fn zero_innovations_stay_at_origin() {
        let p: TimeSeriesPanel<f64> = simulate_with(&example1(0.2, 0.6, 0.7), 64, 100, || 0.0).unwrap();
        assert!(p.channels().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_per_replication() {
        let spec = builtin_system("example3").unwrap();
        let cfg = SimulationConfig::new(256, 42).replication(3).burn_in(500);
        let a: TimeSeriesPanel<f64> = simulate(&spec, &cfg).unwrap();
        let b: TimeSeriesPanel<f64> = simulate(&spec, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 3);
        let c: TimeSeriesPanel<f64> = simulate(&spec, &cfg.replication(4)).unwrap();
        assert_ne!(a, c);
        let redraw: TimeSeriesPanel<f64> = simulate(&spec, &cfg.attempt(1)).unwrap();
        assert_ne!(a, redraw);
        assert_eq!(redraw, simulate(&spec, &cfg.attempt(1)).unwrap());
    }

    #[test]
    fn example1_second_channel_is_ar1() {
        let cfg = SimulationConfig::new(4096, 5);
        let p: TimeSeriesPanel<f64> = simulate(&builtin_system("example1").unwrap(), &cfg).unwrap();
        let rho = lag1_autocorrelation(p.channel(1));
        assert!((rho - 0.6).abs() < 0.05, "{rho}");
    }

    #[test]
    fn explicit_recursion_matches() {
        // Example 5 written out by hand against the term-list engine.
        let spec = example5(0.9, 0.4);
        let n = 300;
        let mut rng = replication_rng(9, 0);
        let draws: Vec<f64> = (0..3 * n).map(|_| rng.sample(StandardNormal)).collect();
        let mut it = draws.iter().copied();
        let p: TimeSeriesPanel<f64> = simulate_with(&spec, n, 0, || it.next().unwrap()).unwrap();
        let g = |x: f64| 3.4 * (x * (1.0 - x * x) * (-x * x).exp());
        let mut x = vec![[0.0f64; 3]; n + 4];
        for t in 4..n + 4 {
            let w = &draws[3 * (t - 4)..3 * (t - 4) + 3];
            x[t][0] = w[0] + g(x[t - 3][0]) + 0.4 * x[t - 4][0];
            x[t][1] = w[1] + g(x[t - 1][1]) + 0.9 * x[t - 2][0].powi(2);
            x[t][2] = w[2] + g(x[t - 2][2]) + 0.4 * x[t - 3][1].powi(2);
        }
        for (t, row) in x[4..].iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((p.channel(c)[t] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn divergence_is_reported() {
        let spec = SystemSpec::custom("blowup", 1, vec![Term::power(0, 0, 1, 2.0, 2)]).unwrap();
        let err = simulate_with::<f64>(&spec, 10, 100, || 1.0).unwrap_err();
        assert!(matches!(err, KgcError::Divergence { channel: 0, .. }));
    }

    #[test]
    fn invalid_custom_specs() {
        assert!(SystemSpec::custom("x", 2, vec![Term::linear(0, 2, 1, 0.1)]).is_err());
        assert!(SystemSpec::custom("x", 2, vec![Term::linear(0, 1, 0, 0.1)]).is_err());
        assert!(SystemSpec::custom("x", 0, vec![]).is_err());
        assert!(builtin_system("example9").is_err());
    }

    #[test]
    fn replication_streams_are_uncorrelated() {
        let n = 4096;
        let mut a = replication_rng(1, 0);
        let mut b = replication_rng(1, 1);
        let xa: Vec<f64> = (0..n).map(|_| a.sample(StandardNormal)).collect();
        let xb: Vec<f64> = (0..n).map(|_| b.sample(StandardNormal)).collect();
        let r: f64 = xa.iter().zip(&xb).map(|(p, q)| p * q).sum::<f64>() / n as f64;
        assert!(r.abs() < 3.0 / (n as f64).sqrt());
    }
}
