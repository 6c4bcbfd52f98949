use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid hyperparameter `{name}`: {value} (must be positive and finite)")]
    InvalidHyperparameter { name: &'static str, value: f64 },

    #[error("invalid kernel configuration: {0}")]
    InvalidKernel(String),

    #[error("kernel family has no RKHS feature representation: {0}")]
    NoRkhsFeatures(String),

    #[error("invalid basis: {0}")]
    InvalidBasis(String),

    #[error("matrix is not PSD within tolerance (max jitter {max_jitter:e})")]
    NotPsd { max_jitter: f64 },

    #[error("implied low-rank-plus-diagonal matrix is not SPD (smallest pivot {pivot:e})")]
    NotSpd { pivot: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid label {0}; probit labels must be -1 or +1")]
    InvalidLabel(f64),

    #[error("full-batch path capped at N = {cap} (got {n}); use the minibatch training path")]
    TooLarge { n: usize, cap: usize },

    #[error("training diverged at iteration {iteration}: non-finite {block}")]
    NonFinite { iteration: usize, block: String },

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Short category name for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config { .. }
            | Error::InvalidKernel(_)
            | Error::InvalidHyperparameter { .. }
            | Error::NoRkhsFeatures(_)
            | Error::InvalidBasis(_)
            | Error::TooLarge { .. } => "config",
            Error::Data(_) | Error::InvalidLabel(_) | Error::Csv(_) | Error::Json(_) | Error::Io(_) => "data",
            Error::DimensionMismatch { .. } | Error::InvalidInput(_) => "input",
            Error::NotPsd { .. } | Error::NotSpd { .. } | Error::NonFinite { .. } => "numerical",
        }
    }

    /// Process exit status: 1 for config errors, 2 for data errors, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" => 1,
            "data" => 2,
            _ => 3,
        }
    }

    /// Field name for config errors.
    pub fn field(&self) -> Option<&str> {
        match self {
            Error::Config { field, .. } => Some(field),
            _ => None,
        }
    }
}
