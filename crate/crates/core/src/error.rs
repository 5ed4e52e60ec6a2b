use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the pipeline can report, from capture parsing to checkpoint IO.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed capture header: {0}")]
    MalformedHeader(String),
    #[error("record {index} claims {claimed} bytes but only {remaining} remain")]
    TruncatedRecord {
        index: usize,
        claimed: usize,
        remaining: usize,
    },
    #[error("malformed capture record {index}: {reason}")]
    MalformedRecord { index: usize, reason: String },
    #[error("unsupported link type {0} (only Ethernet is admissible)")]
    UnsupportedLinkType(u32),
    #[error("malformed packet: {0}")]
    MalformedPacket(String),
    #[error("flow has no packets")]
    EmptyFlow,
    #[error("invalid packet selection policy: {0}")]
    InvalidPolicy(String),

    #[error("cannot tokenize an empty byte sequence")]
    EmptyInput,
    #[error("{got} packets do not fit in a grid of {max} rows")]
    TooManyPackets { got: usize, max: usize },
    #[error("token id {id} is outside the vocabulary of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("grid has no content tokens to mask")]
    NoContentTokens,
    #[error("masking plan is empty")]
    EmptyPlan,
    #[error("packet order is not a permutation: {0:?}")]
    InvalidPermutation(Vec<usize>),
    #[error("contrastive loss needs at least 2 flows and 2 packets, got batch {batch} x {packets}")]
    DegenerateBatch { batch: usize, packets: usize },
    #[error("label {label} is outside [0, {classes})")]
    LabelOutOfRange { label: i64, classes: usize },
    #[error("classifier head has {head} classes but the dataset needs {dataset}")]
    ClassCountMismatch { head: usize, dataset: usize },
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("invalid parameter pattern {pattern:?}: {reason}")]
    InvalidPattern { pattern: String, reason: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("malformed record file at line {line}: {reason}")]
    Interchange { line: usize, reason: String },
    #[error("malformed dataset file: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
