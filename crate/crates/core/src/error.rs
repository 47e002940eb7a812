use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("index {index} out of range (size {size})")]
    OutOfRange { index: usize, size: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("message at level {level}, node {node} normalizes to zero")]
    ZeroNormalization { level: usize, node: usize },

    #[error("message passes not run: {0}")]
    PassesNotRun(&'static str),

    #[error("leaf string is not generable by the grammar (level {level}, block {block})")]
    NotGenerable { level: usize, block: usize },

    #[error("insufficient trajectories: need at least {needed}, got {got}")]
    InsufficientTrajectories { needed: usize, got: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("profiles do not bracket the critical point {0}")]
    NotBracketing(f64),

    #[error("bisection failed: {0}")]
    Bisection(String),

    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("record at line {line}: x0 has {expected} tokens but xhat0 has {got}")]
    RecordLengthMismatch { line: usize, expected: usize, got: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("trajectory failed (datum {datum}, trajectory {trajectory}, noise {noise}): {source}")]
    Trajectory {
        datum: usize,
        trajectory: usize,
        noise: f64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code grouping errors by category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParams(_) | Error::Config(_) => 2,
            Error::Io(_) | Error::Csv(_) => 3,
            Error::MalformedRecord { .. }
            | Error::RecordLengthMismatch { .. }
            | Error::LengthMismatch { .. } | Error::Json(_) => 4,
            Error::ZeroNormalization { .. }
            | Error::NotGenerable { .. }
            | Error::Bisection(_)
            | Error::PassesNotRun(_) => 5,
            Error::InsufficientTrajectories { .. }
            | Error::InsufficientData(_)
            | Error::NotBracketing(_) => 6,
            Error::Trajectory { source, .. } => source.exit_code(),
            Error::OutOfRange { .. } => 1,
        }
    }
}
