use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("model file not found: {0}")]
    ModelNotFound(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("arrival rate {lambda} is not below the maximum batch size {s_max}")]
    Unstable { lambda: f64, s_max: f64 },

    #[error("did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("chain is reducible: states {states:?} do not communicate with state 0")]
    Reducible { states: Vec<usize> },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn param(name: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag, stable across releases.
    pub fn reason(&self) -> &'static str {
        match self {
            Error::InvalidModel(_) => "invalid_model",
            Error::ModelNotFound(_) => "model_file_not_found",
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::Unstable { .. } => "unstable",
            Error::NotConverged { .. } => "not_converged",
            Error::Reducible { .. } => "reducible_chain",
            Error::Singular(_) => "singular_system",
            Error::Shape(_) => "shape_mismatch",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Config(_) => "config_parse",
        }
    }

    /// True for failures of the numerical machinery, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotConverged { .. } | Error::Reducible { .. } | Error::Singular(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
