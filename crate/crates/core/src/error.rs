//! Error types shared across the crate.

use thiserror::Error;

/// Failures raised while simulating full or reduced SDEs.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("initial condition has length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite state on path {path} at step {step}: {state:?}")]
    NonFinite {
        path: usize,
        step: usize,
        state: Vec<f64>,
    },
    #[error("reduced diffusion alpha[{coordinate}]({xi}) = {alpha} is not positive")]
    NonPositiveAlpha {
        coordinate: usize,
        xi: f64,
        alpha: f64,
    },
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ReductionError {
    #[error("assumption violated: a(x) = {a} <= 0 for feature {feature} at {x:?}")]
    NonPositiveA { feature: usize, a: f64, x: Vec<f64> },
    #[error("no probe point found within band {band} of level {xi} for feature {feature}")]
    EmptyLevelSet { feature: usize, xi: f64, band: f64 },
    #[error("reduced model rejected: alpha[{coordinate}]({xi}) = {alpha} is not positive")]
    RejectedAlpha {
        coordinate: usize,
        xi: f64,
        alpha: f64,
    },
    #[error("feature index {index} out of range for {count} features")]
    FeatureIndex { index: usize, count: usize },
    #[error("invalid sampler config: {0}")]
    InvalidSampler(String),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum McError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("degenerate estimate: every path weight underflowed or was non-finite")]
    Degenerate,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PdeError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("safe set is empty on the declared domain")]
    EmptySafeSet,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("Riccati solution blew up at t = {t} before reaching the query time")]
    RiccatiBlowUp { t: f64 },
    #[error("query point {0:?} is outside the solution domain")]
    OutOfDomain(Vec<f64>),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum NeuralError {
    #[error("input has length {got}, network expects {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("invalid widths: {0}")]
    InvalidWidths(String),
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("non-finite gradient entry at index {index} (value {value})")]
    NonFiniteGradient { index: usize, value: f64 },
    #[error("loss closure hit a non-differentiable primitive: {0}")]
    NonDifferentiable(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss {
        epoch: usize,
        last_good: Box<crate::neural::DenseNetwork>,
    },
    #[error("degenerate preimage threshold: all feature samples are identical")]
    DegenerateThreshold,
    #[error("unsupported system: {0}")]
    Unsupported(String),
}

/// Top-level error for the harness and CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Reduction(#[from] ReductionError),
    #[error(transparent)]
    Mc(#[from] McError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Usage/config problems map to exit code 1, numerical failures to 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Io { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
