use std::path::PathBuf;

use thiserror::Error;

use crate::onsager::ModelParameters;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("spectrum is not Hermitian-symmetric (max violation {violation:e} at mode index {index})")]
    HermitianViolation { violation: f64, index: usize },

    #[error("mode cutoff {cutoff} exceeds the available {available} modes")]
    ModeRangeError { cutoff: usize, available: usize },

    #[error("stepper denominator vanished at mode index {mode}")]
    StepperSingular { mode: usize },

    #[error("non-finite state at step {step}")]
    BlowUp { step: usize },

    #[error("non-finite prediction at step {k} of the window starting at snapshot {start}")]
    WindowBlowUp { start: usize, k: usize },

    #[error("strain {strain} at node {node} reached the extension limit {limit} (step {step})")]
    ExtensionLimit {
        node: usize,
        strain: f64,
        limit: f64,
        step: usize,
    },

    #[error("interpolation gap: {0}")]
    InterpolationGap(String),

    #[error("bad magic in {path}: expected {expected}")]
    MagicMismatch { path: PathBuf, expected: &'static str },

    #[error("file {path} is truncated: {detail}")]
    TruncatedFile { path: PathBuf, detail: String },

    #[error("checksum mismatch in {path}: stored {stored:016x}, computed {computed:016x}")]
    ChecksumMismatch {
        path: PathBuf,
        stored: u64,
        computed: u64,
    },

    #[error("malformed header: {0}")]
    Format(String),

    #[error("cannot split dataset: {0}")]
    SplitError(String),

    #[error("non-finite value produced by tape node {node}")]
    NumericOverflow { node: usize },

    #[error("reference field is identically zero")]
    ZeroReference,

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged {
        epoch: usize,
        last_good: Box<ModelParameters>,
    },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("driving force is identically zero")]
    ZeroDrivingForce,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
