use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("dynamics blowup at step {step}: field `{field}` became non-finite")]
    DynamicsBlowup { step: usize, field: &'static str },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular fit: design matrix is rank deficient (condition estimate {condition:.3e}, {rows} rows x {cols} columns)")]
    SingularFit {
        condition: f64,
        rows: usize,
        cols: usize,
    },

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: String, reason: String },

    #[error("degenerate sample batch: {reason} (min cost {min_cost}, mean cost {mean_cost})")]
    DegenerateBatch {
        reason: String,
        min_cost: f64,
        mean_cost: f64,
    },

    #[error("stale opponent {vehicle_id}: latest pose is {age:.3} s old (limit {limit:.3} s)")]
    StaleOpponent { vehicle_id: u8, age: f64, limit: f64 },

    #[error("no pose ever received from vehicle {0}")]
    EmptyInbox(u8),

    #[error("malformed wire record: {0}")]
    Codec(String),

    #[error("i/o error on {path}: {reason}")]
    Io { path: String, reason: String },

    #[error("parse error in {path}: {reason}")]
    Parse { path: String, reason: String },
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.display().to_string(),
            reason: err.to_string(),
        }
    }

    pub(crate) fn parse(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        Error::Parse {
            path: path.display().to_string(),
            reason: err.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
