use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("sequence space too large to enumerate: {size} sequences (budget {budget})")]
    BudgetExceeded { size: u128, budget: u128 },

    #[error("invalid space configuration: {0}")]
    InvalidSpace(String),

    #[error("distributions have mismatched supports ({left} vs {right} outcomes)")]
    SupportMismatch { left: usize, right: usize },

    #[error("support violation at outcome {index}: p > 0 but q = 0")]
    SupportViolation { index: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("unknown context id {ctx} (space has {num} contexts)")]
    UnknownContext { ctx: u32, num: u32 },

    #[error("invalid sequence {seq}: {reason}")]
    InvalidSequence { seq: String, reason: String },

    #[error("degenerate cooperative target: partition function is zero")]
    DegenerateTarget,

    #[error("log of zero: discriminator reaches {value} on outcome {index} with positive weight")]
    LogOfZero { index: usize, value: f64 },

    #[error("division by zero: discriminator equals 1 on outcome {index}")]
    DivisionByZero { index: usize },

    #[error("all importance weights are zero")]
    AllZeroWeights,

    #[error("stale decode: trace was produced for {expected}, queried with {actual}")]
    StaleDecode { expected: String, actual: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("too few samples: need at least {need}, got {got}")]
    TooFewSamples { need: usize, got: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
