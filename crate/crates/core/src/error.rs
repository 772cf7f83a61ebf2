use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A scalar argument fell outside the domain of the function.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// The brute-force prox oracle could not certify a minimizer.
    #[error("oracle failure: {0}")]
    OracleFailure(String),

    #[error("non-finite value at step {step}: {what}")]
    Numeric { step: usize, what: String },

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("step size gamma_{step} = {gamma} violates the PDA bound gamma < 2")]
    StepSize { step: usize, gamma: f64 },

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Training { iteration: usize, loss: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    /// An objective handed back gradients that do not line up with the forward outputs.
    #[error("objective is not differentiable through this network: {0}")]
    NonDifferentiable(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint {path}: unsupported format version {found} (expected {expected})")]
    CheckpointVersion { path: PathBuf, found: u32, expected: u32 },

    #[error("checkpoint {path}: checksum mismatch (truncated or corrupted)")]
    CheckpointChecksum { path: PathBuf },

    #[error("checkpoint {path}: malformed container: {reason}")]
    CheckpointFormat { path: PathBuf, reason: String },

    #[error("checkpoint {path}: architecture mismatch: expected {expected}, found {found}")]
    CheckpointDescriptor { path: PathBuf, expected: String, found: String },

    #[error("stage `{stage}` failed (seed {seed}): {source}")]
    Stage { stage: String, seed: u64, #[source] source: Box<Error> },

    #[error("{path}: {source}")]
    Io { path: PathBuf, #[source] source: std::io::Error },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
