use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("missing directory: {0}")]
    MissingDirectory(PathBuf),
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("point ({x}, {y}) outside {width}x{height} image {image}")]
    OutOfBoundsPoint {
        image: String,
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated checkpoint payload: {0}")]
    TruncatedPayload(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("shape {height}x{width} not divisible by {factor}")]
    NonDivisibleShape {
        height: usize,
        width: usize,
        factor: usize,
    },
    #[error("image {height}x{width} smaller than crop {size}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        size: usize,
    },
    #[error("crop is not square: {height}x{width}")]
    NonSquareCrop { height: usize, width: usize },
    #[error("pixel value {0} outside [0, 1]")]
    BadPixelRange(f64),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("bad prior spec: {0}")]
    BadSpec(String),
    #[error("degenerate batch of size {0}, need at least 2")]
    DegenerateBatch(usize),
    #[error("zero prediction, cannot calibrate scale")]
    ZeroPrediction,
    #[error("clip has no frames: {0}")]
    EmptyClip(String),
    #[error("clip has no fps metadata: {0}")]
    MissingFps(String),
    #[error("failed to decode {path}: {reason}")]
    DecodeFailure { path: PathBuf, reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("clip needs at least 2 valid frames, has {0}")]
    TooFewFrames(usize),
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("image error on {path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code, used by the CLI's error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "E_IO",
            Error::MissingFile(_) => "E_MISSING_FILE",
            Error::MissingDirectory(_) => "E_MISSING_DIRECTORY",
            Error::MalformedManifest(_) => "E_MALFORMED_MANIFEST",
            Error::OutOfBoundsPoint { .. } => "E_OUT_OF_BOUNDS_POINT",
            Error::BadMagic(_) => "E_BAD_MAGIC",
            Error::TruncatedPayload(_) => "E_TRUNCATED_PAYLOAD",
            Error::DuplicateName(_) => "E_DUPLICATE_NAME",
            Error::UnsupportedDtype(_) => "E_UNSUPPORTED_DTYPE",
            Error::NonPositiveSigma(_) => "E_NON_POSITIVE_SIGMA",
            Error::NonDivisibleShape { .. } => "E_NON_DIVISIBLE_SHAPE",
            Error::ImageTooSmall { .. } => "E_IMAGE_TOO_SMALL",
            Error::NonSquareCrop { .. } => "E_NON_SQUARE_CROP",
            Error::BadPixelRange(_) => "E_BAD_PIXEL_RANGE",
            Error::InvalidConfig(_) => "E_INVALID_CONFIG",
            Error::Shape(_) => "E_SHAPE",
            Error::ShapeMismatch { .. } => "E_SHAPE_MISMATCH",
            Error::MissingParam(_) => "E_MISSING_PARAM",
            Error::NonFiniteLoss { .. } => "E_NON_FINITE_LOSS",
            Error::DimensionMismatch(_) => "E_DIMENSION_MISMATCH",
            Error::BadSpec(_) => "E_BAD_SPEC",
            Error::DegenerateBatch(_) => "E_DEGENERATE_BATCH",
            Error::ZeroPrediction => "E_ZERO_PREDICTION",
            Error::EmptyClip(_) => "E_EMPTY_CLIP",
            Error::MissingFps(_) => "E_MISSING_FPS",
            Error::DecodeFailure { .. } => "E_DECODE_FAILURE",
            Error::EmptyDataset => "E_EMPTY_DATASET",
            Error::TooFewFrames(_) => "E_TOO_FEW_FRAMES",
            Error::EmptyInput => "E_EMPTY_INPUT",
            Error::LengthMismatch(..) => "E_LENGTH_MISMATCH",
            Error::Image { .. } => "E_IMAGE",
        }
    }
}
