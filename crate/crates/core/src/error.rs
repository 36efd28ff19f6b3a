use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension must be at least 2 (got {0})")]
    BadDimension(usize),
    #[error("unit exponent count {n1} exceeds dimension {n}")]
    BadUnitCount { n: usize, n1: usize },
    #[error("tail exponent p[{index}] = {value} must be > 1")]
    BadTail { index: usize, value: f64 },
    #[error("critical exponent denominator N1 + sum(1/p_i) - 1 = {0} is not positive")]
    DenominatorNonpositive(f64),
    #[error("SupercriticalExponent: p+ = {p_plus} is not below p* = {p_star}")]
    SupercriticalExponent { p_plus: f64, p_star: f64 },
    #[error("EpsilonTooLarge: eps = {eps}: {reason}")]
    EpsilonTooLarge { eps: f64, reason: String },
    #[error("EmptySchedule: no admissible epsilon in the requested schedule")]
    EmptySchedule,
    #[error("invalid exponents: {0}")]
    InvalidExponents(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid has {nodes} nodes, above the cap of {cap}")]
    TooLarge { nodes: usize, cap: usize },
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("axis {axis} out of range for dimension {dim}")]
    BadAxis { axis: usize, dim: usize },
    #[error("field is identically zero")]
    ZeroField,
    #[error("initial field is zero after projection")]
    ZeroInit,
    #[error("field is not normalized: |u|_q = {0}")]
    NotNormalized(f64),
    #[error("field contains non-finite values")]
    NonFinite,
    #[error("BisectionFailed: {0}")]
    BisectionFailed(String),
    #[error("power transform needs non-negative values")]
    NegativeValues,
    #[error("DegenerateG: g(u) vanishes identically")]
    DegenerateG,
    #[error("ExponentOutOfRange: {0}")]
    ExponentOutOfRange(String),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
