use alloc::string::String;
use core::fmt;

/// Errors shared across the probing toolkit.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Matrix or vector dimensions do not agree.
    Shape(String),
    /// Input contained NaN or infinity where finite values are required.
    NonFinite(String),
    /// A configuration constraint was violated (e.g. head count does not divide d).
    Config(String),
    /// Token id outside the vocabulary range.
    InvalidId(usize),
    /// Sequence longer than the model's position table.
    SequenceTooLong { len: usize, max: usize },
    /// Injection payload does not match the probe input.
    Injection(String),
    /// Index out of range.
    Index(String),
    /// CoNLL-U parse failure, with the 1-based line number.
    Parse { line: usize, msg: String },
    /// Operation applied outside its domain (e.g. structural distance of a word with itself).
    Domain(String),
    /// Probe condition and source index disagree.
    Condition(String),
    /// Training diverged.
    NonFiniteLoss { step: usize },
    /// Operation out of sequence (e.g. gradient read before backward).
    State(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite input: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::InvalidId(id) => write!(f, "invalid token id {id}"),
            Error::SequenceTooLong { len, max } => {
                write!(f, "sequence length {len} exceeds max positions {max}")
            }
            Error::Injection(m) => write!(f, "injection error: {m}"),
            Error::Index(m) => write!(f, "index error: {m}"),
            Error::Parse { line, msg } => write!(f, "parse error at line {line}: {msg}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Condition(m) => write!(f, "condition error: {m}"),
            Error::NonFiniteLoss { step } => write!(f, "non-finite loss at step {step}"),
            Error::State(m) => write!(f, "state error: {m}"),
        }
    }
}

#[cfg(test)]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
