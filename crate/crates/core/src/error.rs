use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: String, reason: String },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: String,
        expected: usize,
        found: usize,
    },

    #[error("unsupported bit depth: {0}")]
    UnsupportedBitDepth(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("band mismatch: expected {expected}, found {found}")]
    BandMismatch { expected: String, found: String },

    #[error("invalid label {label} at pixel {index}")]
    InvalidLabel { label: u8, index: usize },

    #[error("invalid probability map: {0}")]
    InvalidProbabilities(String),

    #[error("zero-variance image cannot be registered")]
    ConstantImage,

    #[error("no similarity between bands: correlation peak {peak:.3} below threshold {threshold:.3}")]
    NoSimilarity { peak: f64, threshold: f64 },

    #[error("empty valid intersection after warping and cropping")]
    EmptyIntersection,

    #[error("degenerate histogram: image is constant")]
    DegenerateHistogram,

    #[error("class never present in dataset: {0:?}")]
    AbsentClass(Vec<u8>),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png error on {}: {message}", path.display())]
    Png { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Stable machine-readable identifier for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidImage(_) => "invalid_image",
            Error::MalformedHeader { .. } => "malformed_header",
            Error::TruncatedPayload { .. } => "truncated_payload",
            Error::UnsupportedBitDepth(_) => "unsupported_bit_depth",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::BandMismatch { .. } => "band_mismatch",
            Error::InvalidLabel { .. } => "invalid_label",
            Error::InvalidProbabilities(_) => "invalid_probabilities",
            Error::ConstantImage => "constant_image",
            Error::NoSimilarity { .. } => "no_similarity",
            Error::EmptyIntersection => "empty_intersection",
            Error::DegenerateHistogram => "degenerate_histogram",
            Error::AbsentClass(_) => "absent_class",
            Error::EmptyInput(_) => "empty_input",
            Error::Shape(_) => "shape_mismatch",
            Error::InvalidConfig(_) => "invalid_config",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Checkpoint(_) => "checkpoint",
            Error::Manifest(_) => "manifest",
            Error::MissingFile(_) => "missing_file",
            Error::Io { .. } => "io",
            Error::Png { .. } => "png",
            Error::Json(_) => "json",
        }
    }

    /// Numeric code used as the process exit status and by the C API.
    pub fn code(&self) -> i32 {
        match self {
            Error::InvalidImage(_) => 10,
            Error::MalformedHeader { .. } => 11,
            Error::TruncatedPayload { .. } => 12,
            Error::UnsupportedBitDepth(_) => 13,
            Error::DimensionMismatch(_) => 14,
            Error::BandMismatch { .. } => 15,
            Error::InvalidLabel { .. } => 16,
            Error::InvalidProbabilities(_) => 17,
            Error::ConstantImage => 20,
            Error::NoSimilarity { .. } => 21,
            Error::EmptyIntersection => 22,
            Error::DegenerateHistogram => 23,
            Error::AbsentClass(_) => 24,
            Error::EmptyInput(_) => 25,
            Error::Shape(_) => 30,
            Error::InvalidConfig(_) => 31,
            Error::NonFiniteLoss { .. } => 32,
            Error::Checkpoint(_) => 33,
            Error::Manifest(_) => 40,
            Error::MissingFile(_) => 41,
            Error::Io { .. } => 42,
            Error::Png { .. } => 43,
            Error::Json(_) => 44,
        }
    }
}
