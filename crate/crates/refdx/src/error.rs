use serde::Serialize;
use serde_json::{json, Value};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] refdx_core::Error),
    #[error(transparent)]
    Harness(#[from] refdx_harness::HarnessError),
    #[error("no calibrated threshold; run calibration or set theta_star")]
    ThetaUnset,
    #[error("image is {width}x{height}; both sides must be at least {min}")]
    TooSmall { width: u32, height: u32, min: u32 },
    #[error("image could not be decoded: {0}")]
    UndecodableImage(String),
    #[error("malformed request: {0}")]
    BadRequest(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl ServiceError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        ServiceError::Io { context: context.into(), source }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Core(e) => e.code(),
            ServiceError::Harness(e) => e.code(),
            ServiceError::ThetaUnset => "THETA_UNSET",
            ServiceError::TooSmall { .. } => "TOO_SMALL",
            ServiceError::UndecodableImage(_) => "UNDECODABLE_IMAGE",
            ServiceError::BadRequest(_) => "BAD_REQUEST",
            ServiceError::Config(_) => "INVALID_CONFIG",
            ServiceError::Io { .. } => "IO_FAILURE",
        }
    }

    /// HTTP status for this error.
    pub fn status(&self) -> u16 {
        use refdx_core::Error as E;
        match self {
            ServiceError::Core(E::DimMismatch { .. }) => 409,
            ServiceError::Core(E::UnknownLabel(_)) => 422,
            ServiceError::Core(E::Io(_)) | ServiceError::Io { .. } => 500,
            _ => 400,
        }
    }

    fn detail(&self) -> Value {
        use refdx_core::Error as E;
        match self {
            ServiceError::Core(E::DimMismatch { expected, found }) => json!({"expected": expected, "found": found}),
            ServiceError::Core(E::UnknownLabel(label)) => json!({"label": label}),
            ServiceError::Core(E::Manifest { line, .. }) => json!({"line": line}),
            ServiceError::TooSmall { width, height, min } => json!({"width": width, "height": height, "min": min}),
            ServiceError::Io { context, .. } => json!({"path": context}),
            _ => Value::Null,
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody { code: self.code().to_string(), message: self.to_string(), detail: self.detail() }
    }
}

/// Wire shape of every error, on HTTP and on the CLI's standard error.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub detail: Value,
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;
