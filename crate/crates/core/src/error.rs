//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameters:\n{}", .0.join("\n"))]
    InvalidParams(Vec<String>),

    #[error("unachievable volume: {target_ml} mL not bracketed by scales [{lo}, {hi}]")]
    UnachievableVolume { target_ml: f64, lo: f64, hi: f64 },

    #[error("geometric infeasibility at frame {frame}: {reason}")]
    GeometryInfeasible { frame: usize, reason: String },

    #[error("{path}: {reason}")]
    Nifti { path: PathBuf, reason: String },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown label value {value} in {path}")]
    UnknownLabel { value: i64, path: PathBuf },

    #[error("degenerate intensity range: volume is constant")]
    DegenerateIntensity,

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss: {term} at step {step}")]
    NonFiniteLoss { term: String, step: u64 },

    #[error("corrupted checkpoint: {0}")]
    CorruptedCheckpoint(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint does not match model config: {0}")]
    CheckpointConfigMismatch(String),

    #[error("checkpoint was trained without the style encoder (use_vae = false)")]
    NotVaeCheckpoint,

    #[error("output {0} already exists (pass overwrite to replace)")]
    WouldOverwrite(PathBuf),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("{0}")]
    Msg(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn msg(s: impl Into<String>) -> Self {
        Error::Msg(s.into())
    }
}
