use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("singular matrix (reciprocal condition {rcond:e})")]
    SingularMatrix { rcond: f64 },
    #[error("degenerate innovation {index}: sample variance {variance:e}")]
    DegenerateInnovation { index: usize, variance: f64 },
    #[error("unidentified model: {0}")]
    Unidentified(String),
    #[error("missing moment of order {order} for shock {shock}")]
    MissingMoment { shock: usize, order: usize },
    #[error("malformed input at line {line}: {message}")]
    Input { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Attaches `path` to an I/O error so the message names the file.
pub(crate) fn at_path(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}
