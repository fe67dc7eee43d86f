use thiserror::Error;

use crate::choice::TripletCase;

/// Errors produced by the preference-learning engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate probability {value:e} for triplet case {case}")]
    DegenerateProbability { case: TripletCase, value: f64 },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("ill-conditioned kernel matrix: {0}")]
    IllConditioned(String),

    #[error("numerical moment error: {0}")]
    NumericalMoment(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error at line {line}: {message}")]
    Validation { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
