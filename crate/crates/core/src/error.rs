use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("zero-size dimension in {op}: shape {shape:?}")]
    EmptyDimension { op: &'static str, shape: Vec<usize> },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("expected a scalar output, got shape {0:?}; reduce to a scalar first")]
    NonScalar(Vec<usize>),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("insufficient audio: need {needed} {unit}, got {got}")]
    InsufficientAudio {
        needed: usize,
        got: usize,
        unit: &'static str,
    },
    #[error("{speakers} active speakers exceed {slots} attractor slots")]
    Capacity { speakers: usize, slots: usize },
    #[error("schedule step {step} outside 0..{total}")]
    Schedule { step: usize, total: usize },
    #[error("mixture generation failed: {0}")]
    Generation(String),
    #[error("scoring error: {0}")]
    Scoring(String),
    #[error("training diverged at step {step}")]
    Divergence { step: usize },
    #[error("training sink failed: {0}")]
    Sink(String),
}
