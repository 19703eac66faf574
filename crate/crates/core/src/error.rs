use thiserror::Error;

#[derive(Debug, Error)]
pub enum SarError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error("lambda = {lambda} is outside the admissible interval [{lo}, {hi}]")]
    LambdaOutOfRange { lambda: f64, lo: f64, hi: f64 },
    #[error("I - lambda W is singular or numerically singular at lambda = {lambda}")]
    SingularShift { lambda: f64 },
    #[error("linear solve failed at lambda = {lambda}: residual {residual:e}")]
    SolveFailed { lambda: f64, residual: f64 },
    #[error("covariate matrix is rank deficient (rank {rank} < {cols})")]
    RankDeficient { rank: usize, cols: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("matrix not invertible: {0}")]
    NotInvertible(String),
    #[error("optimizer failed: {0}")]
    Optimizer(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SarError {
    /// Input and configuration errors map to exit code 2, numeric failures to 1.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            SarError::Dimension(_)
                | SarError::InvalidInput(_)
                | SarError::Config { .. }
                | SarError::Parse { .. }
                | SarError::Io { .. }
                | SarError::RankDeficient { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, SarError>;
