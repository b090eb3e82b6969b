use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the library.
#[derive(Debug, Error)]
pub enum DsdError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    InvalidContext { token: usize, vocab: usize },

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("softened distribution has zero normalizer at tau={tau}")]
    DegenerateMixture { tau: f64 },

    #[error("drafted token {token} has zero draft probability")]
    DraftingContract { token: usize },

    #[error("residual distribution is empty (effective and draft distributions coincide)")]
    EmptyResidual,

    #[error("enumeration too large: {0}")]
    EnumerationTooLarge(String),

    #[error("no grid point satisfies divergence budget {budget}; strictest point has divergence {strictest_divergence}")]
    InfeasibleBudget {
        budget: f64,
        strictest: crate::verifier::KeyCriteria,
        strictest_divergence: f64,
        strictest_accepted_length: f64,
    },

    #[error("reports are not comparable: {std_tokens} standard tokens vs {dsd_tokens} dsd tokens")]
    IncomparableReports {
        std_tokens: usize,
        dsd_tokens: usize,
    },

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DsdError {
    /// Whether the error stems from invalid input rather than a runtime failure.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            DsdError::InvalidDistribution(_)
                | DsdError::InvalidModel(_)
                | DsdError::InvalidContext { .. }
                | DsdError::InvalidParameter { .. }
                | DsdError::EnumerationTooLarge(_)
                | DsdError::Config { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, DsdError>;

pub(crate) fn invalid_param(field: &str, reason: impl Into<String>) -> DsdError {
    DsdError::InvalidParameter {
        field: field.to_string(),
        reason: reason.into(),
    }
}
