use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{what} not found at {path}; {hint}")]
    MissingArtifact { what: String, path: String, hint: String },
    #[error("invalid request: {0}")]
    BadRequest(String),
    #[error("no eligible backend: {reason}")]
    NoEligibleBackend { reason: String, trace_id: String },
    #[error("backend failure: {reason}")]
    Upstream { reason: String, trace_id: String },
    #[error(transparent)]
    Core(#[from] fleetroute_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GatewayError {
    /// HTTP status class for the error.
    pub fn status(&self) -> u16 {
        use fleetroute_core::Error as E;
        match self {
            GatewayError::BadRequest(_) => 400,
            GatewayError::NoEligibleBackend { .. } => 422,
            GatewayError::Upstream { .. } => 502,
            GatewayError::MissingArtifact { .. } => 503,
            GatewayError::Core(E::Precondition(_) | E::Parameter(_) | E::Parse(_) | E::Json(_)) => 400,
            GatewayError::Core(E::NotFound(_) | E::Lookup { .. }) => 404,
            GatewayError::Core(E::Composition(_)) => 422,
            GatewayError::Core(E::UnsupportedMode(_)) => 501,
            _ => 500,
        }
    }

    pub fn trace_id(&self) -> Option<&str> {
        match self {
            GatewayError::NoEligibleBackend { trace_id, .. } | GatewayError::Upstream { trace_id, .. } => Some(trace_id),
            _ => None,
        }
    }
}
