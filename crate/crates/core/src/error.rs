use thiserror::Error;

/// Errors raised by the model, sampler and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("isolated cells (no neighbours within threshold): {ids:?}")]
    IsolatedCells { ids: Vec<u64> },

    #[error("partition infeasible: requested {requested} blocks, at most {max_feasible} fit along that axis")]
    InfeasiblePartition { requested: usize, max_feasible: usize },

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("column `{0}` has zero variance and cannot be standardized")]
    ConstantColumn(String),

    #[error("truncation interval ({lower}, {upper}) around mean {mean} has negligible probability mass")]
    NegligibleMass { mean: f64, lower: f64, upper: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("state invariant violated: {0}")]
    Invariant(String),

    #[error("graph is disconnected ({components} components); intrinsic CAR draw is not identified")]
    Disconnected { components: usize },

    #[error("data error at {location}: {message}")]
    Data { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn data(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Data {
            location: location.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by malformed or inconsistent input data.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::IsolatedCells { .. }
                | Error::ConstantColumn(_)
                | Error::Data { .. }
                | Error::Csv(_)
                | Error::Json(_)
                | Error::InfeasiblePartition { .. }
                | Error::InvalidPartition(_)
                | Error::Disconnected { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
