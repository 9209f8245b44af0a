use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("state bound violated: trajectory {trajectory}, t = {t}: |x| = {norm} > B = {bound}")]
    StateBound {
        trajectory: usize,
        t: usize,
        norm: f64,
        bound: f64,
    },

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("kernel bug: {0}")]
    KernelBug(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("constraint violated: norm {norm} exceeds largest grid value {max}")]
    ConstraintViolated { norm: f64, max: f64 },

    #[error("training diverged at iteration {iteration}")]
    TrainingDiverged { iteration: usize },

    #[error("oracle unavailable: {0}")]
    OracleUnavailable(String),

    #[error("every class of the hierarchy failed to fit")]
    AllClassesFailed,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Process exit code for the CLI: 2 config invalid, 3 solver failure,
    /// 4 divergence, 1 anything else (I/O).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) | Error::InvalidInput(_) | Error::InvalidKernel(_) => 2,
            Error::Format(_) => 2,
            Error::KernelBug(_)
            | Error::Numeric(_)
            | Error::ConstraintViolated { .. }
            | Error::TrainingDiverged { .. }
            | Error::OracleUnavailable(_)
            | Error::AllClassesFailed => 3,
            Error::Divergence(_) | Error::StateBound { .. } => 4,
            Error::Io(_) | Error::Csv(_) => 1,
        }
    }
}
