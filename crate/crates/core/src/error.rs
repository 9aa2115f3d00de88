use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline.
///
/// Variants are grouped by the exit code the command-line front end maps them
/// to: configuration problems, data problems, numerical aborts, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("pseudo labels need exactly one tag, got {0}")]
    MultiTag(usize),

    #[error("record `{0}` has no tags")]
    EmptyTags(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed index line {line}: {reason}")]
    MalformedIndex { line: usize, reason: String },

    #[error("tag {tag} of record `{id}` outside 1..={max}")]
    TagRange { id: String, tag: u32, max: usize },

    #[error("invalid fixture spec: {0}")]
    InvalidSpec(String),

    #[error("class id {id} out of range for {classes} classes")]
    ClassRange { id: usize, classes: usize },

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("no threshold for class {0}")]
    MissingThreshold(u8),

    #[error("probabilities at pixel {pixel} sum to {sum}")]
    Simplex { pixel: usize, sum: f64 },

    #[error("{what} = {value} outside {range}")]
    Range {
        what: &'static str,
        value: f64,
        range: String,
    },

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("iteration {t} exceeds t_max = {t_max}")]
    ScheduleExhausted { t: usize, t_max: usize },

    #[error("non-finite loss at t = {t}: {detail}")]
    NonFiniteLoss { t: usize, detail: String },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("simple record `{0}` has no saliency map")]
    MissingSaliency(String),

    #[error("missing ground truth for `{0}`")]
    MissingGroundTruth(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", .path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
