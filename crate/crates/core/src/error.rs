use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("axis error: {0}")]
    Axis(String),
    #[error("arity error: {0}")]
    Arity(String),
    #[error("tape error: {0}")]
    Tape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("optimizer state error: {0}")]
    OptimizerState(String),
    #[error("invalid net spec: {0}")]
    Spec(String),
    #[error("probabilities not normalized: {0}")]
    Normalization(String),
    #[error("selection error: {0}")]
    Selection(String),
    #[error("batch alignment error: {0}")]
    Alignment(String),
    #[error("coverage error: {0}")]
    Coverage(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset size error: {0}")]
    Size(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("checksum mismatch: {0}")]
    Corruption(String),
    #[error("registry conflict: {0}")]
    Conflict(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-readable name of the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Geometry(_) => "geometry",
            Error::Axis(_) => "axis",
            Error::Arity(_) => "arity",
            Error::Tape(_) => "tape",
            Error::NonFinite(_) => "non_finite",
            Error::OptimizerState(_) => "optimizer_state",
            Error::Spec(_) => "spec",
            Error::Normalization(_) => "normalization",
            Error::Selection(_) => "selection",
            Error::Alignment(_) => "alignment",
            Error::Coverage(_) => "coverage",
            Error::Config(_) => "config",
            Error::Size(_) => "size",
            Error::Format(_) => "format",
            Error::Version(_) => "version",
            Error::Corruption(_) => "corruption",
            Error::Conflict(_) => "conflict",
            Error::NotFound(_) => "not_found",
            Error::Check(_) => "check",
            Error::Io(_) => "io",
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 3,
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}
