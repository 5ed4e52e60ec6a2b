//! Checkpoint files: a text header followed by raw tensor bytes.
//!
//! ```text
//! MIETT-CHECKPOINT 1
//! <TOML: model config, optional training state, tensor manifest>
//! END-HEADER
//! <little-endian f32 data, tensors back to back in manifest order>
//! ```
//!
//! Optimizer moments are stored as extra tensors named `adam.m.<param>` and
//! `adam.v.<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::params::Parameters;
use crate::tensor::Tensor;
use crate::trainer::{Moments, OptimizerState, RngState, TrainConfig};

const MAGIC: &str = "MIETT-CHECKPOINT 1\n";
const END: &str = "END-HEADER\n";
const FIRST_MOMENT: &str = "adam.m.";
const SECOND_MOMENT: &str = "adam.v.";

/// Everything needed to continue an interrupted run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub optimizer: OptimizerState<f32>,
    pub rng: RngState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub training: Option<TrainingState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    training: Option<TrainingHeader>,
    tensor: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct TrainingHeader {
    step: u64,
    rng_seed: String,
    rng_stream: u64,
    /// Decimal; TOML integers stop at 64 bits.
    rng_word_pos: String,
    config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, &Tensor<f32>)> = self.params.named();
        let mut training = None;
        if let Some(t) = &self.training {
            for (name, m) in &t.optimizer.moments {
                tensors.push((format!("{FIRST_MOMENT}{name}"), &m.first));
                tensors.push((format!("{SECOND_MOMENT}{name}"), &m.second));
            }
            training = Some(TrainingHeader {
                step: t.optimizer.step,
                rng_seed: t.rng.seed.iter().map(|b| format!("{b:02x}")).collect(),
                rng_stream: t.rng.stream,
                rng_word_pos: t.rng.word_pos.to_string(),
                config: t.config.clone(),
            });
        }
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(tensors.len());
        for (name, t) in &tensors {
            entries.push(Entry { name: name.clone(), shape: t.shape.clone(), dtype: "f32".into(), offset });
            offset += 4 * t.numel() as u64;
        }
        let header = Header {
            model: self.params.config,
            classes: self.params.classifier.as_ref().map(|c| c.classes()),
            training,
            tensor: entries,
        };
        let text = toml::to_string(&header).map_err(|e| corrupt(format!("header: {e}")))?;
        let mut out = Vec::with_capacity(MAGIC.len() + text.len() + END.len() + offset as usize);
        out.extend_from_slice(MAGIC.as_bytes());
        out.extend_from_slice(text.as_bytes());
        if !text.ends_with('\n') {
            out.push(b'\n');
        }
        out.extend_from_slice(END.as_bytes());
        for (_, t) in &tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes.strip_prefix(MAGIC.as_bytes()).ok_or_else(|| corrupt("missing magic line"))?;
        let marker = format!("\n{END}");
        let split = rest
            .windows(marker.len())
            .position(|w| w == marker.as_bytes())
            .ok_or_else(|| corrupt("missing end of header"))?;
        let text = std::str::from_utf8(&rest[..split + 1]).map_err(|_| corrupt("header is not UTF-8"))?;
        let data = &rest[split + marker.len()..];
        let header: Header = toml::from_str(text).map_err(|e| corrupt(format!("header: {e}")))?;
        header.model.validate().map_err(|e| corrupt(e.to_string()))?;
        let mut params = ModelParams::<f32>::zeros(header.model, header.classes).map_err(|e| corrupt(e.to_string()))?;

        let mut stored: BTreeMap<&str, Tensor<f32>> = BTreeMap::new();
        let mut expected_offset = 0u64;
        for e in &header.tensor {
            if e.dtype != "f32" {
                return Err(corrupt(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            if e.offset != expected_offset {
                return Err(corrupt(format!("{}: offset {} where {expected_offset} was expected", e.name, e.offset)));
            }
            let numel: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * numel;
            let raw = data.get(start..end).ok_or_else(|| corrupt(format!("{}: data truncated", e.name)))?;
            let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            if stored.insert(&e.name, Tensor { shape: e.shape.clone(), data: values }).is_some() {
                return Err(corrupt(format!("{} stored twice", e.name)));
            }
            expected_offset = end as u64;
        }
        if data.len() as u64 != expected_offset {
            return Err(corrupt(format!("{} data bytes, manifest covers {expected_offset}", data.len())));
        }

        let mut shapes = BTreeMap::new();
        let mut missing = None;
        params.visit_mut("", &mut |name, t| match stored.remove(name) {
            Some(s) if s.shape == t.shape => {
                shapes.insert(name.to_string(), s.shape.clone());
                *t = s;
            }
            Some(s) => missing = missing.take().or(Some(format!("{name}: shape {:?}, model needs {:?}", s.shape, t.shape))),
            None => missing = missing.take().or(Some(format!("{name} missing"))),
        });
        if let Some(m) = missing {
            return Err(corrupt(m));
        }

        let training = match header.training {
            None => None,
            Some(th) => {
                let mut moments = BTreeMap::new();
                for (name, shape) in &shapes {
                    let first = stored.remove(format!("{FIRST_MOMENT}{name}").as_str());
                    let second = stored.remove(format!("{SECOND_MOMENT}{name}").as_str());
                    match (first, second) {
                        (Some(first), Some(second)) if &first.shape == shape && &second.shape == shape => {
                            moments.insert(name.clone(), Moments { first, second });
                        }
                        (None, None) => {}
                        _ => return Err(corrupt(format!("optimizer moments of {name} are inconsistent"))),
                    }
                }
                let seed = parse_seed(&th.rng_seed)?;
                let word_pos = th.rng_word_pos.parse().map_err(|_| corrupt("bad rng word position"))?;
                Some(TrainingState {
                    config: th.config,
                    optimizer: OptimizerState { step: th.step, moments },
                    rng: RngState { seed, stream: th.rng_stream, word_pos },
                })
            }
        };
        if let Some(name) = stored.keys().next() {
            return Err(corrupt(format!("unexpected tensor {name}")));
        }
        Ok(Checkpoint { params, training })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Fails unless the stored model has exactly this configuration.
    pub fn expect_config(&self, config: &ModelConfig) -> Result<()> {
        if &self.params.config != config {
            return Err(corrupt(format!("checkpoint holds {:?}, expected {:?}", self.params.config, config)));
        }
        Ok(())
    }
}

fn parse_seed(hex: &str) -> Result<[u8; 32]> {
    let mut seed = [0u8; 32];
    if hex.len() != 64 {
        return Err(corrupt("rng seed must be 64 hex digits"));
    }
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| corrupt("bad rng seed"))?;
    }
    Ok(seed)
}
