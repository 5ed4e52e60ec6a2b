//! Multi-instance encrypted traffic transformer.
//!
//! The crate covers the whole path from a packet capture to a trained flow
//! classifier: capture parsing and session grouping ([`ingest`]), bigram
//! tokenization ([`tokenizer`]), the two-level attention encoder ([`model`]),
//! the three self-supervised objectives ([`pretrain`]), the classification head
//! ([`finetune`]) and the optimization loop ([`trainer`]). [`synthetic`]
//! generates labeled traffic for tests and demos.

pub mod baseline;
pub mod checkpoint;
pub mod error;
pub mod finetune;
pub mod ingest;
pub mod model;
pub mod nn;
pub mod params;
pub mod pretrain;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{FlowTensor, ModelConfig, ModelParams, TokenBatch};
pub use params::Parameters;
pub use tensor::{Scalar, Tensor};
pub use tokenizer::{TokenDataset, TokenGrid};
