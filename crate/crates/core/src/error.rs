use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (bad dimensions, invalid
    /// configuration, empty inputs).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A factorization or evaluation failed even after jitter.
    #[error("numerical failure in {context}: {detail}")]
    Numerical { context: String, detail: String },

    /// Stochastic optimization produced a non-finite objective.
    #[error("fit aborted at iteration {iteration}: non-finite ELBO term `{term}`")]
    FitAborted {
        iteration: usize,
        term: String,
        snapshot: Option<Box<crate::vi::VariationalState>>,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numerical(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            detail: detail.into(),
        }
    }

    /// Stable machine-readable identifier for the error class.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract_violation",
            Error::Numerical { .. } => "numerical_failure",
            Error::FitAborted { .. } => "fit_aborted",
            Error::Parse { .. } => "parse_error",
            Error::Io(_) => "io_error",
            Error::Json(_) => "json_error",
            Error::Csv(_) => "csv_error",
        }
    }

    /// True for failures caused by the numbers rather than by the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. } | Error::FitAborted { .. })
    }
}
