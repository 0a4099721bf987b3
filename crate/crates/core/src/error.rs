use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A malformed record in a line-delimited input file.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A template body that cannot be parsed (unbalanced braces, bad names).
    #[error("template parse error: {0}")]
    Template(String),

    #[error("duplicate id `{0}`")]
    Conflict(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("render error: sample has no field for placeholder `{0}`")]
    Render(String),

    #[error("no template with arity {wanted}; available arities: {available:?}")]
    NoMatchingArity { wanted: usize, available: Vec<usize> },

    #[error("transport error after {retries} retries: {message}")]
    Transport { retries: u32, message: String },

    #[error("answer-choice generation failed: {0}")]
    Generation(String),

    #[error("unavailable: {0}")]
    Unavailable(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("non-finite loss at step {step} (lr {lr:e})")]
    NonFiniteLoss { step: usize, lr: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration or missing inputs, detected before any work starts.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stage `{stage}` failed: {source} (artifacts written: {artifacts:?})")]
    Stage {
        stage: String,
        artifacts: Vec<String>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Whether this error means the inputs were unusable (as opposed to a
    /// failure while running).
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Validation(_)
            | Error::Parse { .. }
            | Error::Template(_)
            | Error::Conflict(_)
            | Error::Json(_) => true,
            Error::Io(e) => e.kind() == std::io::ErrorKind::NotFound,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
