use thiserror::Error;

/// Errors raised by the emulator library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("feedback matrix is not diagonalizable with distinct real eigenvalues: {0}")]
    NonDiagonalizable(String),

    #[error("non-positive concentration {value} for agent `{agent}` at step {step}")]
    NonPositiveConcentration {
        agent: String,
        step: usize,
        value: f64,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("Gram matrix is not positive definite after jitter {jitter:e}")]
    SingularGram { jitter: f64 },

    #[error("non-finite objective: {0}")]
    NonFinite(String),

    #[error("regressor has zero variance: {0}")]
    DegenerateRegressor(String),

    #[error("empty grid")]
    EmptyGrid,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("non-positive variance {value} at index {index}")]
    NonPositiveVariance { index: usize, value: f64 },

    #[error("empty baseline window {0}..={1}")]
    EmptyWindow(i32, i32),

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("unknown row: scenario `{scenario}`, year {year}")]
    UnknownRow { scenario: String, year: i32 },

    #[error("{path}: parse error at line {line}, column `{column}`: {message}")]
    Parse {
        path: String,
        line: u64,
        column: String,
        message: String,
    },

    #[error("{path}: schema error: {message}")]
    Schema { path: String, message: String },

    #[error("{path}: grid error: {message}")]
    Grid { path: String, message: String },

    #[error("model file error: {0}")]
    Model(String),

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
