use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sample ids missing from modality `{modality}`: {ids:?}")]
    Join { modality: String, ids: Vec<String> },

    #[error("parse error in {file} at row {row}, column {col}: {msg}")]
    Parse {
        file: String,
        row: usize,
        col: usize,
        msg: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("checkpoint holds a {found} head, expected {expected}")]
    KindTag {
        expected: &'static str,
        found: &'static str,
    },

    #[error("missing artifact {path}: run `{command}` first")]
    Prerequisite { path: PathBuf, command: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}
