use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },

    #[error("cannot encode image {path}: {message}")]
    ImageEncode { path: PathBuf, message: String },

    #[error("unsupported bit depth or pixel layout in {path}: {layout}")]
    UnsupportedBitDepth { path: PathBuf, layout: String },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image too small: {width}x{height}, need at least {min}x{min}")]
    ImageTooSmall { width: usize, height: usize, min: usize },

    #[error("degenerate content: {0}")]
    DegenerateContent(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("singular transform (det = {det:e})")]
    SingularTransform { det: f64 },

    #[error("pair unregistrable: {0}")]
    Unregistrable(String),

    #[error("point ({x}, {y}) outside the B-spline support")]
    OutsideSupport { x: f64, y: f64 },

    #[error("loss became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("no valid NCC windows: image {width}x{height} smaller than window {window}")]
    NoValidWindows {
        width: usize,
        height: usize,
        window: usize,
    },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("slice {0} is not placed in the reference frame")]
    UnplacedSlice(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed structured file {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
