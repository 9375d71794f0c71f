use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector has (near) zero norm")]
    ZeroVector,
    #[error("vector contains NaN or infinite entries")]
    NonFinite,
    #[error("embedding dimension must be at least 2, got {0}")]
    DimTooSmall(usize),
    #[error("embedding is not unit-norm (norm {0})")]
    NotNormalized(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("invalid label catalog: {0}")]
    InvalidCatalog(String),
    #[error("class id {0} is not in the label catalog")]
    UnknownClassId(i64),
    #[error("label {0:?} is not in the label catalog")]
    UnknownLabel(String),
    #[error("duplicate item id {0}")]
    IdCollision(u64),

    #[error("not a library file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported library format version {0}")]
    VersionMismatch(u16),
    #[error("corrupt library record: {0}")]
    CorruptRecord(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("manifest contains no items")]
    EmptyManifest,
    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("library is empty")]
    EmptyLibrary,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("hit list is empty")]
    EmptyHits,
    #[error("item {0} is unlabeled and cannot contribute to a diagnosis")]
    UnlabeledHit(u64),
    #[error("length mismatch: {predictions} predictions, {truths} truths")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("nothing to evaluate")]
    EmptyEvaluation,
    #[error("invalid top-k cutoff {0}")]
    InvalidCutoff(usize),

    #[error("invalid ensemble parameters: {0}")]
    InvalidEnsemble(String),
    #[error("ensemble has zero passes")]
    EnsembleDegenerate,
    #[error("every coordinate was masked after {0} attempts")]
    AllMasked(u32),
    #[error("calibration needs both correct and incorrect samples")]
    OneClassOnly,
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("category {0:?} has no samples")]
    EmptyCategory(String),

    #[error("review sheet is incomplete: {0}")]
    IncompleteSheet(String),
    #[error("case store metadata is missing item {0}")]
    MissingMetadata(u64),
}

impl Error {
    /// Stable machine-readable code used in error JSON.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ZeroVector => "ZERO_VECTOR",
            Error::NonFinite => "NON_FINITE",
            Error::DimTooSmall(_) => "DIM_TOO_SMALL",
            Error::NotNormalized(_) => "NOT_NORMALIZED",
            Error::DimMismatch { .. } => "DIM_MISMATCH",
            Error::InvalidCatalog(_) => "INVALID_CATALOG",
            Error::UnknownClassId(_) => "UNKNOWN_CLASS_ID",
            Error::UnknownLabel(_) => "UNKNOWN_LABEL",
            Error::IdCollision(_) => "ID_COLLISION",
            Error::BadMagic => "BAD_MAGIC",
            Error::VersionMismatch(_) => "VERSION_MISMATCH",
            Error::CorruptRecord(_) => "CORRUPT_RECORD",
            Error::Manifest { .. } => "BAD_MANIFEST",
            Error::EmptyManifest => "EMPTY_MANIFEST",
            Error::Io(_) => "IO_FAILURE",
            Error::EmptyLibrary => "EMPTY_LIBRARY",
            Error::ZeroK => "INVALID_K",
            Error::EmptyHits => "EMPTY_HITS",
            Error::UnlabeledHit(_) => "UNLABELED_HIT",
            Error::LengthMismatch { .. } => "LENGTH_MISMATCH",
            Error::EmptyEvaluation => "EMPTY_EVALUATION",
            Error::InvalidCutoff(_) => "INVALID_CUTOFF",
            Error::InvalidEnsemble(_) => "INVALID_ENSEMBLE",
            Error::EnsembleDegenerate => "ENSEMBLE_DEGENERATE",
            Error::AllMasked(_) => "ALL_MASKED",
            Error::OneClassOnly => "ONE_CLASS_ONLY",
            Error::InvalidThreshold(_) => "INVALID_THRESHOLD",
            Error::EmptyCategory(_) => "EMPTY_CATEGORY",
            Error::IncompleteSheet(_) => "INCOMPLETE_SHEET",
            Error::MissingMetadata(_) => "MISSING_METADATA",
        }
    }
}

/// Prefixes an I/O error with the path it concerns.
pub(crate) fn with_path(path: &std::path::Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}
