use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("rank-deficient design: offending column indices {columns:?}")]
    RankDeficient { columns: Vec<usize> },

    #[error("non-identifiable model: {0}")]
    NonIdentifiable(String),

    #[error("singular matrix while {0}: ridge escalation exhausted")]
    Singular(String),

    #[error("combination failed: {0}")]
    Combination(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("summary format error: {0}")]
    Format(String),

    #[error("model fingerprint mismatch: {0}")]
    Fingerprint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Classifies the error for process exit codes: `true` for problems with
    /// the input data or files, `false` for numerical failures.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_)
                | Error::Data(_)
                | Error::Partition(_)
                | Error::Scenario(_)
                | Error::Format(_)
                | Error::Fingerprint(_)
                | Error::Io(_)
                | Error::Json(_)
                | Error::Dimension(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
