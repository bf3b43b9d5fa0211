use thiserror::Error;
use tvo_core::TvoError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] TvoError),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{0} needs a model file (--model-spec)")]
    MissingModel(&'static str),

    #[error("{command} needs a {expected} model, got {actual}")]
    WrongModelKind {
        command: &'static str,
        expected: &'static str,
        actual: &'static str,
    },

    #[error("cannot read model file {path}: {source}")]
    UnreadableModel { path: String, source: TvoError },

    #[error("training diverged at epoch {epoch}: non-finite {what}")]
    Divergence { epoch: usize, what: &'static str },

    #[error("sandwich violated at epoch {epoch}: {tvo_lower} <= {log_px} <= {tvo_upper} fails")]
    Sandwich {
        epoch: usize,
        tvo_lower: f64,
        log_px: f64,
        tvo_upper: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
