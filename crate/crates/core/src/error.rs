use std::path::PathBuf;

use crate::losses::LossBreakdown;
use crate::model::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A file could not be parsed. `location` is a line number or a field name.
    #[error("{path}: format error at {location}: {message}")]
    Format {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("validation failed: {}", join_violations(.0))]
    Validation(Vec<Violation>),

    #[error("shape mismatch in {op}: {shapes}")]
    Shape { op: &'static str, shapes: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss at iteration {iteration}: {breakdown}")]
    NonFinite {
        iteration: u64,
        breakdown: LossBreakdown,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, location: impl ToString, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            location: location.to_string(),
            message: message.to_string(),
        }
    }

    pub(crate) fn shape(op: &'static str, shapes: impl ToString) -> Self {
        Error::Shape {
            op,
            shapes: shapes.to_string(),
        }
    }
}
