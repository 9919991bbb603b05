use thiserror::Error;

pub type Result<T> = std::result::Result<T, GeeError>;

#[derive(Debug, Error)]
pub enum GeeError {
    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("correlation parameter {value} out of range for {kind}")]
    Parameter { kind: &'static str, value: f64 },

    #[error("working correlation for cluster {cluster} is not positive definite")]
    NotPositiveDefinite { cluster: String },

    #[error("rank-deficient information matrix at iteration {iteration}")]
    RankDeficient { iteration: usize },

    #[error("structure {structure} infeasible: {detail}")]
    StructureInfeasible {
        structure: &'static str,
        detail: String,
    },

    #[error("fit has not converged; criteria refuse unconverged fits")]
    NotConverged,

    #[error("I - H is singular for cluster {cluster}; the cluster dominates the fit")]
    DeletionSingular { cluster: String },

    #[error("cluster index {index} out of range for {count} clusters")]
    IndexOutOfRange { index: usize, count: usize },

    #[error("no candidate structure converged")]
    SelectionFailed,

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("invalid hypothesis: {0}")]
    InvalidHypothesis(String),

    #[error(
        "correlation {target} outside attainable range [{lo:.6}, {hi:.6}] for means ({mean_a}, {mean_b})"
    )]
    RangeViolation {
        mean_a: f64,
        mean_b: f64,
        target: f64,
        lo: f64,
        hi: f64,
    },

    #[error("invalid margin: {0}")]
    InvalidMargin(String),

    #[error("latent correlation matrix could not be repaired: {0}")]
    Generation(String),

    #[error("scenario failed: {0}")]
    Scenario(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl GeeError {
    /// Attach a cluster identifier to errors raised before it was known.
    pub fn for_cluster(self, id: &str) -> Self {
        match self {
            GeeError::NotPositiveDefinite { .. } => GeeError::NotPositiveDefinite {
                cluster: id.to_string(),
            },
            GeeError::DeletionSingular { .. } => GeeError::DeletionSingular {
                cluster: id.to_string(),
            },
            other => other,
        }
    }
}
