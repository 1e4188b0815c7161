use crate::error::{KgcError, Result};
use crate::scalar::Scalar;

/// A D-variate real time series stored channel by channel.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesPanel<T> {
    channels: Vec<Vec<T>>,
    names: Vec<String>,
}

impl<T: Scalar> TimeSeriesPanel<T> {
    /// Builds a panel, checking equal lengths and finiteness.
    pub fn new(channels: Vec<Vec<T>>, names: Vec<String>) -> Result<Self> {
        if channels.is_empty() {
            return Err(KgcError::Data("panel has no channels".into()));
        }
        if names.len() != channels.len() {
            return Err(KgcError::Data(format!(
                "{} channel names for {} channels",
                names.len(),
                channels.len()
            )));
        }
        let len = channels[0].len();
        if len == 0 {
            return Err(KgcError::Data("panel has no samples".into()));
        }
        for (c, ch) in channels.iter().enumerate() {
            if ch.len() != len {
                return Err(KgcError::Data(format!(
                    "channel '{}' has {} samples, expected {}",
                    names[c],
                    ch.len(),
                    len
                )));
            }
            if let Some(t) = ch.iter().position(|v| !v.finite()) {
                return Err(KgcError::Data(format!(
                    "channel '{}' has a non-finite sample at index {}",
                    names[c], t
                )));
            }
        }
        Ok(Self { channels, names })
    }

    /// Builds a panel with default names `x1..xD`.
    pub fn from_channels(channels: Vec<Vec<T>>) -> Result<Self> {
        let names = (1..=channels.len()).map(|i| format!("x{i}")).collect();
        Self::new(channels, names)
    }

    /// Builds a panel from row-major samples (one row per time index).
    pub fn from_rows(rows: &[Vec<T>], names: Vec<String>) -> Result<Self> {
        let dim = names.len();
        let mut channels = vec![Vec::with_capacity(rows.len()); dim];
        for (t, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(KgcError::Data(format!(
                    "row {} has {} values, expected {}",
                    t,
                    row.len(),
                    dim
                )));
            }
            for (c, v) in row.iter().enumerate() {
                channels[c].push(*v);
            }
        }
        Self::new(channels, names)
    }

    pub fn dim(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    /// Always false: construction rejects empty panels.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channel(&self, i: usize) -> &[T] {
        &self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<T>] {
        &self.channels
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Reorders channels so that new channel `k` is old channel `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.dim()];
        if perm.len() != self.dim() {
            return Err(KgcError::Parameter("permutation length mismatch".into()));
        }
        for &p in perm {
            if p >= self.dim() || seen[p] {
                return Err(KgcError::Parameter(format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        Ok(Self {
            channels: perm.iter().map(|&p| self.channels[p].clone()).collect(),
            names: perm.iter().map(|&p| self.names[p].clone()).collect(),
        })
    }

    /// Keeps the trailing `n` samples of every channel.
    pub fn tail(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(KgcError::Parameter(format!(
                "cannot take {n} trailing samples of a length-{} panel",
                self.len()
            )));
        }
        let start = self.len() - n;
        Ok(Self {
            channels: self.channels.iter().map(|c| c[start..].to_vec()).collect(),
            names: self.names.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_ragged_and_non_finite() {
        assert!(TimeSeriesPanel::<f64>::from_channels(vec![vec![1.0, 2.0], vec![1.0]]).is_err());
        assert!(TimeSeriesPanel::from_channels(vec![vec![1.0, f64::NAN]]).is_err());
        assert!(TimeSeriesPanel::<f64>::from_channels(vec![]).is_err());
        assert!(TimeSeriesPanel::<f64>::from_channels(vec![vec![]]).is_err());
    }

    #[test]
    fn rows_round_trip() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let p = TimeSeriesPanel::from_rows(&rows, vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(p.channel(1), &[2.0, 4.0, 6.0]);
        assert_eq!(p.len(), 3);
        let q = p.permuted(&[1, 0]).unwrap();
        assert_eq!(q.names()[0], "b");
        assert_eq!(q.channel(0), &[2.0, 4.0, 6.0]);
    }
}
