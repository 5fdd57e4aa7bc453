use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("point ({x:.3}, {y:.3}) lies outside the grid")]
    OutOfRange { x: f64, y: f64 },

    #[error("tile ({col}, {row}) is not a valid index for a {n_cols}x{n_rows} grid")]
    InvalidIndex {
        col: u32,
        row: u32,
        n_cols: u32,
        n_rows: u32,
    },

    #[error("tile ({col}, {row}) is not fully covered by scene {scene_id}")]
    Coverage { scene_id: String, col: u32, row: u32 },

    #[error("split protocol error: {0}")]
    Protocol(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("training aborted: {0}")]
    Training(String),

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("stage `{stage}` cannot run: {reason} (hint: {hint})")]
    Precondition {
        stage: String,
        reason: String,
        hint: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error("tiff: {0}")]
    Tiff(#[from] tiff::TiffError),

    #[error("png decode: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("png encode: {0}")]
    PngEncode(#[from] png::EncodingError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for unmet preconditions, 3 for failed
    /// validation, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Precondition { .. } => 2,
            Error::Validation(_) | Error::Protocol(_) => 3,
            _ => 1,
        }
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
