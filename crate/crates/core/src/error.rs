use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite signal")]
    NonFiniteSignal,
    #[error("non-Hermitian spectrum (deviation {deviation:.3e}, tolerance {tolerance:.3e})")]
    NonHermitian { deviation: f64, tolerance: f64 },
    #[error("invalid one-sided spectrum: {0}")]
    InvalidOneSided(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid counts: n_bins={n_bins}, t_num={t_num}, s_num={s_num}")]
    InvalidCounts {
        n_bins: usize,
        t_num: usize,
        s_num: usize,
    },
    #[error("tau must lie in [0, 1], got {0}")]
    InvalidTau(f64),
    #[error("band mask must keep at least one band")]
    EmptyMask,
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("tape was produced under a different pipeline configuration")]
    ConfigMismatch,
    #[error("diverged: {0}")]
    Diverged(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated stream: {0}")]
    Truncated(&'static str),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("record has no token matrix")]
    MissingTokenMatrix,
    #[error("record has no sentence offsets")]
    MissingSentenceOffsets,
    #[error("perturbation requires a donor pool")]
    MissingDonorPool,
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("empty population for cell {0}")]
    EmptyPopulation(String),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors raised by numeric blow-up during training.
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Diverged(_))
    }

    /// True for configuration and argument errors.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::InvalidTau(_) | Error::EmptyMask | Error::ConfigMismatch
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
