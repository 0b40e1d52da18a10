use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("row {row}: expected {expected} dimensions, found {found}")]
    DimensionMismatch { row: usize, expected: usize, found: usize },

    #[error("row {row}: duplicate item id {id:?}")]
    DuplicateId { row: usize, id: String },

    #[error("row {row}, column {col}: non-finite value")]
    NonFinite { row: usize, col: usize },

    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroNorm { row: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("eigendecomposition did not converge within {max_iter} iterations")]
    EigenNotConverged { max_iter: usize },

    #[error("component {component} covariance stayed singular after regularization up to {max_reg:e}")]
    SingularCovariance { component: usize, max_reg: f64 },

    #[error("every k in [{k_min}, {k_max}] failed to fit")]
    AllFitsFailed { k_min: usize, k_max: usize },

    #[error("perplexity calibration failed for row {row} after {steps} steps")]
    Calibration { row: usize, steps: usize },

    #[error("optimization diverged at iteration {iteration}; try a lower learning_rate")]
    Diverged { iteration: usize },

    #[error("embedding has non-finite coordinates")]
    NonFiniteEmbedding,

    #[error("evaluation requires labels (item {item:?} is unlabeled)")]
    MissingLabel { item: String },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("manifest has no {0} section")]
    MissingSection(&'static str),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
