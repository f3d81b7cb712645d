use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("block `{block}`: {msg}")]
    Shape { block: String, msg: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(
        "cannot reach {target} parameters for {arch} within {:.1}%: nearest achievable count is {nearest}",
        tolerance * 100.0
    )]
    InfeasibleBudget {
        arch: String,
        target: u64,
        nearest: u64,
        tolerance: f64,
    },

    #[error("{}:{row}: {msg}", path.display())]
    Manifest { path: PathBuf, row: usize, msg: String },

    #[error("stratified split infeasible; tags without positives in every split: {0:?}")]
    Stratification(Vec<String>),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("malformed data: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
