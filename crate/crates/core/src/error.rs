use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised anywhere in the numeric pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    NonFiniteInput,
    UnnormalizedDistribution { total: f64 },
    TokenOutOfVocabulary { token: usize, vocab: usize },
    GradientBlowUp { path: String },
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    NoReplacementToken,
    NotEnumerable { vocab: usize, len: usize },
    AbsoluteContinuityViolated,
    Diverged { step: u64 },
    EmptyBatch,
    TooFewSamples { needed: usize, found: usize },
    InvalidConfig(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NonFiniteInput => write!(f, "non-finite input"),
            Error::UnnormalizedDistribution { total } => {
                write!(f, "unnormalized distribution (total mass {total})")
            }
            Error::TokenOutOfVocabulary { token, vocab } => {
                write!(f, "token out of vocabulary: {token} >= {vocab}")
            }
            Error::GradientBlowUp { path } => write!(f, "gradient blow-up at `{path}`"),
            Error::ShapeMismatch { expected, found } => {
                write!(f, "shape mismatch: expected {expected:?}, found {found:?}")
            }
            Error::NoReplacementToken => write!(f, "no replacement token exists"),
            Error::NotEnumerable { vocab, len } => {
                write!(f, "not enumerable: {vocab}^{len} sequences exceeds 10^6")
            }
            Error::AbsoluteContinuityViolated => write!(f, "absolute continuity violated"),
            Error::Diverged { step } => write!(f, "diverged at step {step}"),
            Error::EmptyBatch => write!(f, "empty batch"),
            Error::TooFewSamples { needed, found } => write!(f, "too few samples: need {needed}, got {found}"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
