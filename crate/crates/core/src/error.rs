use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}{}", context_suffix(.context))]
    ShapeMismatch {
        left: Vec<usize>,
        right: Vec<usize>,
        context: Option<String>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("non-finite value in tensor `{0}`")]
    NonFinite(String),

    #[error("duplicate or empty tensor name `{0}`")]
    BadName(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest at byte {position}: {message}")]
    Manifest { position: usize, message: String },

    #[error("payload length mismatch: manifest declares {expected} bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("base fingerprint mismatch: {expected} vs {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("invalid recipe: {0}")]
    Recipe(String),

    #[error("unknown merge method `{0}` (expected average, task_arithmetic or ties)")]
    UnknownMethod(String),

    #[error("filter `{0}` matches no tensor")]
    EmptyFilter(String),

    #[error("config mismatch: {0}")]
    Config(String),

    #[error("non-finite activation in block {block}")]
    NonFiniteActivation { block: usize },

    #[error("svd: {0}")]
    Svd(String),

    #[error("routing: {0}")]
    Routing(String),

    #[error("encoder failed for task `{task}`: {message}")]
    Encoder { task: String, message: String },

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn context_suffix(context: &Option<String>) -> String {
    context
        .as_ref()
        .map(|c| format!(" ({c})"))
        .unwrap_or_default()
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(left: &[usize], right: &[usize], context: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            left: left.to_vec(),
            right: right.to_vec(),
            context: Some(context.into()),
        }
    }

    /// Short stable identifier used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidTensor(_) => "invalid_tensor",
            Error::NonFinite(_) => "non_finite",
            Error::BadName(_) => "bad_name",
            Error::MissingTensor(_) => "missing_tensor",
            Error::Io { .. } => "io",
            Error::Manifest { .. } => "manifest",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::FingerprintMismatch { .. } => "fingerprint_mismatch",
            Error::Recipe(_) => "recipe",
            Error::UnknownMethod(_) => "unknown_method",
            Error::EmptyFilter(_) => "empty_filter",
            Error::Config(_) => "config",
            Error::NonFiniteActivation { .. } => "non_finite_activation",
            Error::Svd(_) => "svd",
            Error::Routing(_) => "routing",
            Error::Encoder { .. } => "encoder",
            Error::Diverged { .. } => "diverged",
            Error::Stage { .. } => "stage",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn at_stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Stage {
            stage,
            source: Box::new(source),
        }
    }
}
