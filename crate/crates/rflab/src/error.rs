use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid point: {0}")]
    InvalidPoint(String),
    #[error("chart error: {0}")]
    Chart(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("conditioning error: {0}")]
    Conditioning(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("integrator error: {0}")]
    Integrator(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("empty ensemble")]
    EmptyEnsemble,
    #[error("parse error at line {line}, key `{key}`: {msg}")]
    Parse { line: usize, key: String, msg: String },
    #[error("i/o error on {path}: {msg}")]
    Io { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, LabError>;
