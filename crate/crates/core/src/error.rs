use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("unknown {kind} `{id}`")]
    Lookup { kind: &'static str, id: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no result produced: {0}")]
    EmptyResult(String),

    #[error("composition failed: {0}")]
    Composition(String),

    #[error("invalid workflow: {0}")]
    Workflow(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("unsupported in this mode: {0}")]
    UnsupportedMode(String),

    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn lookup(kind: &'static str, id: impl Into<String>) -> Self {
        Error::Lookup {
            kind,
            id: id.into(),
        }
    }
}
