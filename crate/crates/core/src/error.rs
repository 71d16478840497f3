use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at column {column}: {message}")]
    Syntax { column: usize, message: String },

    #[error("unit factor `{0}` appears more than once")]
    DuplicateFactor(String),

    #[error("unit factor `{name}` has size {size}; sizes must be at least 2")]
    FactorSize { name: String, size: usize },

    #[error("unknown stratum `{0}`")]
    UnknownStratum(String),

    #[error("unknown factor `{0}`")]
    UnknownFactor(String),

    #[error("matrix has no rows or no columns")]
    EmptyMatrix,

    #[error("matrix contains a non-finite entry")]
    NonFinite,

    #[error("rank is ambiguous: pivot ratio {ratio:e} lies too close to tolerance {tol:e}")]
    AmbiguousRank { ratio: f64, tol: f64 },

    #[error("probability must lie in [0, 1), got {0}")]
    Probability(f64),

    #[error("degrees of freedom must be positive, got ({0}, {1})")]
    DegreesOfFreedom(f64, f64),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid criterion weights: {0}")]
    Weights(String),

    #[error("invalid model: {0}")]
    Model(String),

    #[error("invalid construction plan: {0}")]
    Plan(String),

    #[error("stratum `{stratum}`: no nonsingular starting design after {tries} draws")]
    InfeasibleStart { stratum: String, tries: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid design file: {0}")]
    Design(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
