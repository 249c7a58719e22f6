use thiserror::Error;

use crate::seq::PartitionError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("position {0} is already revealed")]
    RevealUnmasked(usize),
    #[error("invalid token id {token} for vocabulary of size {vocab}")]
    InvalidToken { token: u64, vocab: usize },
    #[error("position {pos} out of range for length {len}")]
    PositionOutOfRange { pos: usize, len: usize },
    #[error("sequence length {got} does not match expected length {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("vocabulary mismatch: expected {expected} tokens, got {got}")]
    VocabMismatch { expected: usize, got: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("duplicate symbol {0:?} in vocabulary")]
    DuplicateSymbol(String),
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(#[from] PartitionError),
    #[error("no masked positions left to select")]
    NoMaskedPositions,
    #[error("rule {rule} selected an invalid set {selected:?} (masked: {masked:?})")]
    InvalidSelection {
        rule: String,
        selected: Vec<usize>,
        masked: Vec<usize>,
    },
    #[error("invalid rule: {0}")]
    InvalidRule(String),
    #[error("enumeration cap exceeded: {what} = {value} > {cap}")]
    EnumerationCap {
        what: &'static str,
        value: usize,
        cap: usize,
    },
    #[error("block size {block} does not divide length {len}")]
    BlockMismatch { block: usize, len: usize },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("gap closed is ill-defined: ELBO gap {0} <= 0")]
    IllDefined(f64),
    #[error("serialization: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
