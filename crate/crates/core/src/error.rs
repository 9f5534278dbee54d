use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FlimError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FlimError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported image format: {0}")]
    Format(String),
    #[error("dataset layout error: {0}")]
    Layout(String),
    #[error("duplicate image id `{0}` with conflicting entries")]
    DuplicateId(String),
    #[error("stroke set produced no marker pixels")]
    EmptyStroke,
    #[error("invalid patch size {k} for a {height}x{width} representation (must be odd and at most twice the smaller side)")]
    BadPatchSize { k: usize, height: usize, width: usize },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid marker set: {0}")]
    InvalidMarkers(String),
    #[error("too few patches: need at least {needed}, got {got}")]
    TooFewPatches { needed: usize, got: usize },
    #[error("invalid cluster count: {0}")]
    BadK(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid pooling window {window} / stride {stride} for a {height}x{width} map")]
    BadWindow {
        window: usize,
        stride: usize,
        height: usize,
        width: usize,
    },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("insufficient markers: {0}")]
    InsufficientMarkers(String),
    #[error("training data contains a single class")]
    SingleClass,
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid perplexity {perplexity} for {points} points (need 0 < perplexity < N/3)")]
    BadPerplexity { perplexity: f64, points: usize },
    #[error("too few points for an embedding: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("corrupt or unsupported container: {0}")]
    Decode(String),
}

impl FlimError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FlimError::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable name of the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            FlimError::Io { .. } => "IoError",
            FlimError::Format(_) => "FormatError",
            FlimError::Layout(_) => "LayoutError",
            FlimError::DuplicateId(_) => "DuplicateIdError",
            FlimError::EmptyStroke => "EmptyStrokeError",
            FlimError::BadPatchSize { .. } => "BadPatchSizeError",
            FlimError::Parse { .. } => "ParseError",
            FlimError::InvalidMarkers(_) => "InvalidMarkersError",
            FlimError::TooFewPatches { .. } => "TooFewPatchesError",
            FlimError::BadK(_) => "BadKError",
            FlimError::DimMismatch(_) => "DimMismatchError",
            FlimError::BadWindow { .. } => "BadWindowError",
            FlimError::EmptyInput(_) => "EmptyInputError",
            FlimError::InsufficientMarkers(_) => "InsufficientMarkersError",
            FlimError::SingleClass => "SingleClassError",
            FlimError::Divergence { .. } => "DivergenceError",
            FlimError::LengthMismatch { .. } => "LengthMismatchError",
            FlimError::BadPerplexity { .. } => "BadPerplexityError",
            FlimError::TooFewPoints { .. } => "TooFewPointsError",
            FlimError::Config(_) => "ConfigError",
            FlimError::Decode(_) => "DecodeError",
        }
    }
}
