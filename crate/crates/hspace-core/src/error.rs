use thiserror::Error;

/// All failure modes of the crate. Each variant maps to a stable category
/// string used by the CLI for machine-parseable error lines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("vocabulary: unknown token `{0}`")]
    Vocabulary(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("hspace: {0}")]
    HSpace(String),
    #[error("policy: {0}")]
    Policy(String),
    #[error("registry: {0}")]
    Registry(String),
    #[error("provenance: {0}")]
    Provenance(String),
    #[error("training: {0}")]
    Training(String),
    #[error("optimization: {0}")]
    Optimization(String),
    #[error("data: {0}")]
    Data(String),
    #[error("evaluation-blocked: {0}")]
    EvaluationBlocked(String),
    #[error("metric-undefined: {0}")]
    MetricUndefined(String),
    #[error("format: {0}")]
    Format(String),
    #[error("suite-mismatch: {0}")]
    SuiteMismatch(String),
    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable one-word category for CLI error reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Schema(_) => "schema",
            Error::Vocabulary(_) => "vocabulary",
            Error::Shape(_) => "shape",
            Error::HSpace(_) => "hspace",
            Error::Policy(_) => "policy",
            Error::Registry(_) => "registry",
            Error::Provenance(_) => "provenance",
            Error::Training(_) => "training",
            Error::Optimization(_) => "optimization",
            Error::Data(_) => "data",
            Error::EvaluationBlocked(_) => "evaluation-blocked",
            Error::MetricUndefined(_) => "metric-undefined",
            Error::Format(_) => "format",
            Error::SuiteMismatch(_) => "suite-mismatch",
            Error::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
