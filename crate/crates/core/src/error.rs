use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("sequence length {len} is shorter than the receptive field; at least {required} steps are required")]
    Length { len: usize, required: usize },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("session has no fixations")]
    EmptySession,

    #[error("window of {samples} samples is too short for band filtering (need at least 2)")]
    DegenerateWindow { samples: usize },

    #[error("session has {len} steps but the maximum length is {max}; increase max_len")]
    Overflow { len: usize, max: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for errors caused by the input data rather than numerics or usage.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. }
                | Error::Length { .. }
                | Error::EmptySession
                | Error::DegenerateWindow { .. }
                | Error::Overflow { .. }
                | Error::Parse { .. }
                | Error::Io(_)
                | Error::Json(_)
        )
    }
}
