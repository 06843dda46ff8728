use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("cold-start split: {0}")]
    Split(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("batch iteration: {0}")]
    Iteration(String),
    #[error("training diverged at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },
    #[error("unknown id: {0}")]
    Lookup(String),
    #[error("behavior encoder: {0}")]
    Encoder(String),
    #[error("inference: {0}")]
    Inference(String),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing upstream stage `{stage}`: {detail}")]
    MissingStage { stage: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::Contract(_) => "contract",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Split(_) => "split",
            Error::Spec(_) => "spec",
            Error::Iteration(_) => "iteration",
            Error::Training { .. } => "training",
            Error::Lookup(_) => "lookup",
            Error::Encoder(_) => "encoder",
            Error::Inference(_) => "inference",
            Error::Eval(_) => "eval",
            Error::Protocol(_) => "protocol",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::MissingStage { .. } => "missing_stage",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
