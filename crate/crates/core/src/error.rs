use std::fmt;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("integration diverged at step {step} (|state| > {threshold:e})")]
    Divergence { step: usize, threshold: f64 },

    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),

    #[error("no registered hyperparameters for {0}; set gamma, max_grad_norm, value_coef and n_assim_per_episode under [ppo]")]
    UnknownHyperparams(String),

    #[error(
        "t = {requested} is not an observation time; nearest valid times are {below} and {above}"
    )]
    NotObservationTime {
        requested: f64,
        below: f64,
        above: f64,
    },

    #[error("{0}")]
    Config(#[from] ConfigError),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn dims(context: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            got,
        }
    }
}

/// A configuration problem tied to a named field and, when known, a line in the source file.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            line: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "config line {line}: `{}`: {}", self.field, self.message),
            None => write!(f, "config: `{}`: {}", self.field, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}
