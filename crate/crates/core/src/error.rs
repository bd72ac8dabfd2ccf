use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A value outside the domain of a geometric function (e.g. non-positive depth).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    Input(String),

    /// The reprojected point lies behind the target camera.
    #[error("guidance unavailable: point behind target camera")]
    GuidanceUnavailable,

    #[error("triangulation degenerate: {0}")]
    TriangulationDegenerate(String),

    #[error("epipolar line degenerate: {0}")]
    EpipolarDegenerate(String),

    #[error("no guidance point could be produced")]
    NoGuidance,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("grid degenerate: only {valid} in-bounds points")]
    GridDegenerate { valid: usize },

    #[error("sampling out of bounds at ({x}, {y})")]
    SamplingOutOfBounds { x: f64, y: f64 },

    #[error("patch out of bounds at ({x}, {y})")]
    PatchOutOfBounds { x: f64, y: f64 },

    #[error("energy scale fit failed: {0}")]
    FitFailed(String),

    #[error("marginalization failed: {0}")]
    MarginalizationFailed(String),

    #[error("normalization skipped: mean determinant {0} below floor")]
    NormalizationSkipped(f64),

    #[error("parse error at {file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },

    #[error("missing frame {0}")]
    MissingFrame(u64),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
