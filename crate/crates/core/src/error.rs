use thiserror::Error;

/// Errors raised by the fitting, clustering and simulation routines.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("invalid basis configuration: {0}")]
    InvalidBasis(String),

    #[error("value {value} is outside the basis domain [{lo}, {hi}]")]
    OutOfDomain { value: f64, lo: f64, hi: f64 },

    #[error("invalid covariance parameters: {0}")]
    InvalidCovariance(String),

    #[error("covariance matrix is not positive definite (jitter up to {max_jitter:e}, min diagonal {min_diag:e}, max diagonal {max_diag:e})")]
    NotPositiveDefinite {
        max_jitter: f64,
        min_diag: f64,
        max_diag: f64,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("model not identifiable: {0}")]
    Identifiability(String),

    #[error("normal equations are rank deficient: {0}")]
    RankDeficient(String),

    #[error("cluster {cluster} is degenerate (total responsibility {mass:e})")]
    DegenerateCluster { cluster: usize, mass: f64 },

    #[error("optimizer failed: {0}")]
    Optimizer(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid scenario: {0}")]
    Scenario(String),
}

impl Error {
    /// Stable machine-readable identifier of the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidBasis(_) => "invalid_basis",
            Error::OutOfDomain { .. } => "out_of_domain",
            Error::InvalidCovariance(_) => "invalid_covariance",
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::Dimension(_) => "dimension_mismatch",
            Error::Identifiability(_) => "identifiability",
            Error::RankDeficient(_) => "rank_deficient",
            Error::DegenerateCluster { .. } => "degenerate_cluster",
            Error::Optimizer(_) => "optimizer",
            Error::Data(_) => "invalid_data",
            Error::Scenario(_) => "invalid_scenario",
        }
    }

    /// Whether the error stems from an identifiability violation of the model.
    pub fn is_identifiability(&self) -> bool {
        matches!(
            self,
            Error::Identifiability(_) | Error::RankDeficient(_) | Error::DegenerateCluster { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
