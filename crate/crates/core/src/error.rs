use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the annotation-proposal pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("image {width}x{height} is smaller than the {window}px window")]
    ImageTooSmall {
        width: u32,
        height: u32,
        window: u32,
    },
    #[error("rectangle {rect:?} lies outside a {width}x{height} raster")]
    OutOfBounds {
        rect: crate::imaging::Rect,
        width: u32,
        height: u32,
    },
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("incompatible model: {0}")]
    Incompatible(String),
    #[error("degenerate hull: all {0} input points are collinear")]
    DegenerateHull(usize),
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("nothing to aggregate: no defined precision or recall cells")]
    EmptyReport,
    #[error("generation error: {0}")]
    Generation(String),
    #[error("corrupt model file: {0}")]
    CorruptModel(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error on {path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("malformed record in {path} line {line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable code, used by the gateway's error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Integrity(_) | Error::DanglingReference(_) => "integrity",
            Error::Conflict(_) => "conflict",
            Error::NotFound(_) => "not-found",
            Error::ImageTooSmall { .. }
            | Error::OutOfBounds { .. }
            | Error::InvalidDimensions(_)
            | Error::Validation(_)
            | Error::UnknownClass(_) => "validation",
            Error::Config(_) => "config",
            Error::Incompatible(_) => "incompatible",
            _ => "internal",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
