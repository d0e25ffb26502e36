//! Error type shared by every pipeline stage.
//!
//! Each variant's `Display` output starts with the variant name so the CLI can
//! report which failure case occurred.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("MissingFile: {0}")]
    MissingFile(PathBuf),
    #[error("MalformedHeader: {0}")]
    MalformedHeader(String),
    #[error("NonInvertibleAffine: {0}")]
    NonInvertibleAffine(String),
    #[error("InvalidVolume: {0}")]
    InvalidVolume(String),
    #[error("UnwritablePath: {path}: {reason}")]
    UnwritablePath { path: PathBuf, reason: String },
    #[error("InterpMismatch: trilinear interpolation requested on mask modality {0}")]
    InterpMismatch(String),
    #[error("NegativeIntensity: {0} voxels below zero")]
    NegativeIntensity(usize),
    #[error("EmptyMask: {0}")]
    EmptyMask(String),
    #[error("DegenerateIntensity: {0}")]
    DegenerateIntensity(String),
    #[error("GridMismatch: {0}")]
    GridMismatch(String),
    #[error("SequenceMisaligned: {0}")]
    SequenceMisaligned(String),
    #[error("EmptySequence")]
    EmptySequence,
    #[error("TooFewPatients: need at least 2 distinct patients, got {0}")]
    TooFewPatients(usize),
    #[error("SingleClass: {0}")]
    SingleClass(String),
    #[error("OutOfRangeGGG: {0} (expected 0..=5)")]
    OutOfRangeGgg(i64),
    #[error("InvalidDescriptor: {0}")]
    InvalidDescriptor(String),
    #[error("NonFiniteLoss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),
    #[error("SpaceExhausted: all {0} points evaluated")]
    SpaceExhausted(usize),
    #[error("NoConvLayer")]
    NoConvLayer,
    #[error("BadK: top_k {k} outside 1..={len}")]
    BadK { k: usize, len: usize },
    #[error("MissingModelBundle: {0}")]
    MissingModelBundle(PathBuf),
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("SelftestFailed: {0}")]
    SelftestFailed(String),
    #[error("InvalidManifest: {0}")]
    InvalidManifest(String),
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
    #[error("Json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn unwritable(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::UnwritablePath {
            path: path.into(),
            reason: err.to_string(),
        }
    }
}
