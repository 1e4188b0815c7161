//! Mercer kernels and lagged kernel moment estimation.
//!
//! The feature map is never built. Every feature-space second moment is an
//! average of kernel evaluations over the data:
//!
//! ```text
//! K(τ)[i][j] = (1/n_s) · Σ_{s} κ(x_i(s), x_j(s+τ)),   s over the overlap of length n_s − |τ|
//! ```
//!
//! The divisor stays `n_s` at every lag so that the block-Toeplitz matrix
//! built from these moments is positive semidefinite.

use nalgebra::DMatrix;

use crate::error::{KgcError, Result};
use crate::panel::TimeSeriesPanel;
use crate::scalar::Scalar;

/// Evaluation contract shared by all kernels.
pub trait MercerKernel<T: Scalar> {
    fn eval(&self, x: T, y: T) -> Result<T>;
}

/// Polynomial kernel `κ(x, y) = (c + x·y)^d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec<T> {
    offset: T,
    degree: u32,
}

impl<T: Scalar> KernelSpec<T> {
    pub fn new(offset: T, degree: u32) -> Result<Self> {
        if degree == 0 {
            return Err(KgcError::Parameter("kernel degree must be at least 1".into()));
        }
        if !offset.finite() || offset < T::zero() {
            return Err(KgcError::Parameter(format!(
                "kernel offset must be finite and non-negative, got {offset}"
            )));
        }
        Ok(Self { offset, degree })
    }

    /// `(x·y)`, the raw cross moment.
    pub fn linear() -> Self {
        Self { offset: T::zero(), degree: 1 }
    }

    /// `(x·y)²`.
    pub fn quadratic() -> Self {
        Self { offset: T::zero(), degree: 2 }
    }

    /// `(x·y)⁴`.
    pub fn quartic() -> Self {
        Self { offset: T::zero(), degree: 4 }
    }

    pub fn offset(&self) -> T {
        self.offset
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    #[inline]
    fn raw(&self, x: T, y: T) -> T {
        (self.offset + x * y).powi(self.degree as i32)
    }

    /// Coefficients `w_k = C(d, k) · c^(d−k)` of the expansion
    /// `κ(x, y) = Σ_k w_k x^k y^k`.
    fn expansion(&self) -> Vec<T> {
        let d = self.degree as usize;
        let mut binom = T::one();
        (0..=d)
            .map(|k| {
                if k > 0 {
                    binom = binom * T::from_usize_lossy(d + 1 - k) / T::from_usize_lossy(k);
                }
                binom * self.offset.powi((d - k) as i32)
            })
            .collect()
    }
}

impl<T: Scalar> MercerKernel<T> for KernelSpec<T> {
    fn eval(&self, x: T, y: T) -> Result<T> {
        let v = self.raw(x, y);
        if v.finite() {
            Ok(v)
        } else {
            Err(KgcError::KernelOverflow { magnitude: (x * y).abs().as_f64() })
        }
    }
}

/// Whether kernel moments are taken about the feature-space mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Centering {
    /// Raw moments `E⟨φ(x_i)|φ(x_j)⟩`.
    #[default]
    None,
    /// Moments of `φ(x) − m`, with `m` the sample mean feature vector,
    /// evaluated through the polynomial expansion of the kernel.
    FeatureMean,
}

/// Estimated kernel moment matrices `K̂(τ)` for `τ ∈ [−L, L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaggedKernelSet<T: Scalar> {
    max_lag: usize,
    matrices: Vec<DMatrix<T>>,
    sample_count: usize,
    names: Vec<String>,
}

impl<T: Scalar> LaggedKernelSet<T> {
    /// Builds a set from the non-negative lags `K(0), …, K(L)`; negative lags
    /// are mirrored as transposes.
    pub fn from_nonnegative(
        nonneg: Vec<DMatrix<T>>,
        sample_count: usize,
        names: Vec<String>,
    ) -> Result<Self> {
        let Some(first) = nonneg.first() else {
            return Err(KgcError::Parameter("at least K(0) is required".into()));
        };
        let dim = first.nrows();
        if dim == 0 || nonneg.iter().any(|m| m.nrows() != dim || m.ncols() != dim) {
            return Err(KgcError::Parameter("lagged kernel matrices must be square and equal-sized".into()));
        }
        if names.len() != dim {
            return Err(KgcError::Parameter("one name per channel is required".into()));
        }
        let max_lag = nonneg.len() - 1;
        let mut matrices: Vec<DMatrix<T>> = nonneg[1..].iter().rev().map(|m| m.transpose()).collect();
        matrices.extend(nonneg);
        Ok(Self { max_lag, matrices, sample_count, names })
    }

    pub fn max_lag(&self) -> usize {
        self.max_lag
    }

    pub fn dim(&self) -> usize {
        self.matrices[0].nrows()
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// `K̂(τ)`. Panics when `|τ| > max_lag`.
    pub fn at(&self, tau: isize) -> &DMatrix<T> {
        self.get(tau).unwrap_or_else(|| panic!("lag {tau} outside ±{}", self.max_lag))
    }

    pub fn get(&self, tau: isize) -> Option<&DMatrix<T>> {
        let idx = tau + self.max_lag as isize;
        if idx < 0 {
            return None;
        }
        self.matrices.get(idx as usize)
    }

    pub(crate) fn require_lag(&self, needed: usize, what: &str) -> Result<()> {
        if self.max_lag < needed {
            Err(KgcError::Parameter(format!(
                "{what} needs kernel moments up to lag {needed}, only {} estimated",
                self.max_lag
            )))
        } else {
            Ok(())
        }
    }

    /// Fails with the first channel whose `K̂(0)` diagonal is not positive.
    pub fn check_nondegenerate(&self) -> Result<()> {
        let k0 = self.at(0);
        for i in 0..self.dim() {
            let v = k0[(i, i)];
            if !(v > T::zero()) {
                return Err(KgcError::DegenerateChannel {
                    channel: self.names[i].clone(),
                    value: v.as_f64(),
                });
            }
        }
        Ok(())
    }
}

/// Averages kernel values over lagged sample pairs, raw moments.
pub fn estimate_lagged_kernels<T: Scalar>(
    panel: &TimeSeriesPanel<T>,
    spec: &KernelSpec<T>,
    max_lag: usize,
) -> Result<LaggedKernelSet<T>> {
    estimate_lagged_kernels_with(panel, spec, max_lag, Centering::None)
}

pub fn estimate_lagged_kernels_with<T: Scalar>(
    panel: &TimeSeriesPanel<T>,
    spec: &KernelSpec<T>,
    max_lag: usize,
    centering: Centering,
) -> Result<LaggedKernelSet<T>> {
    let n = panel.len();
    if max_lag >= n {
        return Err(KgcError::Parameter(format!(
            "maximum lag {max_lag} must be below the series length {n}"
        )));
    }
    let dim = panel.dim();
    let n_t = T::from_usize_lossy(n);

    let mut nonneg = Vec::with_capacity(max_lag + 1);
    for tau in 0..=max_lag {
        let overlap = n - tau;
        let mut m = DMatrix::<T>::zeros(dim, dim);
        for i in 0..dim {
            let xi = &panel.channel(i)[..overlap];
            for j in 0..dim {
                let xj = &panel.channel(j)[tau..];
                let mut acc = T::zero();
                for (&a, &b) in xi.iter().zip(xj) {
                    acc += spec.raw(a, b);
                }
                if !acc.finite() {
                    return Err(overflow_error(spec, xi, xj));
                }
                m[(i, j)] = acc / n_t;
            }
        }
        nonneg.push(m);
    }

    if centering == Centering::FeatureMean {
        center_in_place(panel, spec, &mut nonneg);
    }

    LaggedKernelSet::from_nonnegative(nonneg, n, panel.names().to_vec())
}

fn overflow_error<T: Scalar>(spec: &KernelSpec<T>, xi: &[T], xj: &[T]) -> KgcError {
    let magnitude = xi
        .iter()
        .zip(xj)
        .find(|(&a, &b)| !spec.raw(a, b).finite())
        .map(|(&a, &b)| (a * b).abs().as_f64())
        .unwrap_or(f64::INFINITY);
    KgcError::KernelOverflow { magnitude }
}

/// Replaces raw moments by moments of the mean-removed feature series:
/// `(1/n) Σ_s ⟨φ(x_i(s)) − m_i | φ(x_j(s+τ)) − m_j⟩`.
fn center_in_place<T: Scalar>(panel: &TimeSeriesPanel<T>, spec: &KernelSpec<T>, nonneg: &mut [DMatrix<T>]) {
    let n = panel.len();
    let n_t = T::from_usize_lossy(n);
    let dim = panel.dim();
    let weights = spec.expansion();
    let d = weights.len();

    // power_means[i][k] = mean of x_i^k
    let power_means: Vec<Vec<T>> = (0..dim)
        .map(|i| {
            (0..d)
                .map(|k| {
                    let s = panel.channel(i).iter().fold(T::zero(), |acc, &x| acc + x.powi(k as i32));
                    s / n_t
                })
                .collect()
        })
        .collect();
    // ⟨φ(x) | m_j⟩ for every sample of channel i, stored per (i, j)
    let embed = |x: T, j: usize| -> T {
        (0..d).fold(T::zero(), |acc, k| acc + weights[k] * x.powi(k as i32) * power_means[j][k])
    };
    let mean_inner = |i: usize, j: usize| -> T {
        (0..d).fold(T::zero(), |acc, k| acc + weights[k] * power_means[i][k] * power_means[j][k])
    };
    let projections: Vec<Vec<Vec<T>>> = (0..dim)
        .map(|i| (0..dim).map(|j| panel.channel(i).iter().map(|&x| embed(x, j)).collect()).collect())
        .collect();

    for (tau, m) in nonneg.iter_mut().enumerate() {
        let overlap = n - tau;
        for i in 0..dim {
            for j in 0..dim {
                let left = projections[i][j][..overlap].iter().fold(T::zero(), |a, &v| a + v);
                let right = projections[j][i][tau..].iter().fold(T::zero(), |a, &v| a + v);
                let correction =
                    (left + right) / n_t - mean_inner(i, j) * T::from_usize_lossy(overlap) / n_t;
                m[(i, j)] -= correction;
            }
        }
    }
}

/// Normalized kernel correlation `K̂(τ)_ij / sqrt(K̂(0)_ii · K̂(0)_jj)`.
pub fn kcf<T: Scalar>(kset: &LaggedKernelSet<T>, i: usize, j: usize, tau: isize) -> Result<T> {
    let dim = kset.dim();
    if i >= dim || j >= dim {
        return Err(KgcError::Parameter(format!("channel index out of range for D = {dim}")));
    }
    let k = kset
        .get(tau)
        .ok_or_else(|| KgcError::Parameter(format!("lag {tau} outside ±{}", kset.max_lag())))?;
    let k0 = kset.at(0);
    for c in [i, j] {
        if !(k0[(c, c)] > T::zero()) {
            return Err(KgcError::DegenerateChannel {
                channel: kset.names()[c].clone(),
                value: k0[(c, c)].as_f64(),
            });
        }
    }
    Ok(k[(i, j)] / (k0[(i, i)] * k0[(j, j)]).sqrt())
}

/// Normalizes every lag of a set at once: `R(τ) = S K(τ) S`,
/// `S = diag(K(0))^(−1/2)`.
pub fn kcf_matrices<T: Scalar>(kset: &LaggedKernelSet<T>) -> Result<LaggedKernelSet<T>> {
    kset.check_nondegenerate()?;
    let k0 = kset.at(0);
    let scale: Vec<T> = (0..kset.dim()).map(|i| T::one() / k0[(i, i)].sqrt()).collect();
    let nonneg = (0..=kset.max_lag() as isize)
        .map(|tau| {
            let mut m = kset.at(tau).clone();
            for ((i, j), v) in m.iter_mut().enumerate().map(|(idx, v)| ((idx % kset.dim(), idx / kset.dim()), v)) {
                *v *= scale[i] * scale[j];
            }
            m
        })
        .collect();
    LaggedKernelSet::from_nonnegative(nonneg, kset.sample_count(), kset.names().to_vec())
}

/// Gram matrix `[κ(x_a, x_b)]` of a sample set.
pub fn gram_matrix<T: Scalar, K: MercerKernel<T>>(kernel: &K, samples: &[T]) -> Result<DMatrix<T>> {
    let m = samples.len();
    let mut g = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let v = kernel.eval(samples[a], samples[b])?;
            g[(a, b)] = v;
            g[(b, a)] = v;
        }
    }
    Ok(g)
}
