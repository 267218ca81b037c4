use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid knots: {0}")]
    InvalidKnots(String),

    #[error("no basis functions: the atom set is empty")]
    NoBasis,

    #[error("Lipschitz bound inapplicable: {0}")]
    BoundInapplicable(String),

    #[error("invalid sample size {0}: need n >= 2")]
    InvalidSampleSize(usize),

    #[error("state outside prior support: {0}")]
    OutOfSupport(String),

    #[error("infeasible spacing: delta={delta} leaves no room for {knots} knots on a domain of length {length}")]
    InfeasibleSpacing { delta: f64, knots: usize, length: f64 },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("coefficient precision matrix is not positive definite after jitter")]
    Conditioning,

    #[error("chain output holds no draws")]
    NoDraws,

    #[error("x = {0} lies outside [0, 1]")]
    OutsideDomain(f64),

    #[error("degenerate function: zero standard deviation on the grid")]
    ZeroScale,

    #[error("step {h} is not a positive multiple of the grid spacing {step}")]
    NotGridAligned { h: f64, step: f64 },

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
