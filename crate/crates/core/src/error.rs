use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite input")]
    NonFinite,

    #[error("empty effective batch")]
    EmptyBatch,

    #[error("image smaller than minimum box ({height}x{width} < {min_h}x{min_w})")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min_h: usize,
        min_w: usize,
    },

    #[error("box out of bounds: {0}")]
    OutOfBounds(String),

    #[error("band mismatch: model expects {expected} bands, data has {got}")]
    BandMismatch { expected: usize, got: usize },

    #[error("no answers")]
    NoAnswers,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("{}: parse error at byte {offset}: {msg}", file.display())]
    Parse {
        file: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("{}: truncated, expected {expected} bytes but found {actual}", file.display())]
    Truncated {
        file: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown split `{0}`")]
    UnknownSplit(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (configs, flags, mismatched
    /// files) rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::BandMismatch { .. } | Error::UnknownSplit(_) | Error::ImageTooSmall { .. }
        )
    }
}
