use thiserror::Error;

/// Errors raised by estimation, testing and simulation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum KgcError {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("kernel value is not finite for inputs of magnitude {magnitude:e}")]
    KernelOverflow { magnitude: f64 },

    #[error("channel '{channel}' is degenerate: zero-lag kernel moment is {value:e}")]
    DegenerateChannel { channel: String, value: f64 },

    #[error("kernel Gram matrix is ill-conditioned: condition estimate {condition:e} exceeds cap {cap:e}")]
    IllConditioned { condition: f64, cap: f64 },

    #[error("matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("total least squares solution is not unique: {0}")]
    NonUniqueSolution(String),

    #[error("singular {what} (condition estimate {condition:e})")]
    Singular { what: String, condition: f64 },

    #[error("no admissible model order: {0}")]
    NoAdmissibleOrder(String),

    #[error("trajectory diverged at step {step} on channel {channel} (value {value:e})")]
    Divergence { step: usize, channel: usize, value: f64 },
}

impl KgcError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            KgcError::KernelOverflow { .. }
                | KgcError::DegenerateChannel { .. }
                | KgcError::IllConditioned { .. }
                | KgcError::RankDeficient(_)
                | KgcError::NonUniqueSolution(_)
                | KgcError::Singular { .. }
                | KgcError::NoAdmissibleOrder(_)
                | KgcError::Divergence { .. }
        )
    }
}

pub type Result<T, E = KgcError> = std::result::Result<T, E>;
