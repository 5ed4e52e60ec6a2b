//! Shared fixtures for the criterion benches.

use miett_core::ingest::SelectionPolicy;
use miett_core::synthetic::{generate_token_dataset, SyntheticSpec};
use miett_core::{ModelConfig, ModelParams, TokenBatch, TokenGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Desk-sized model with the given flow shape.
pub fn config(packets: usize, len: usize) -> ModelConfig {
    ModelConfig { packets, len, ..ModelConfig::desk() }
}

pub fn params(config: ModelConfig, classes: Option<usize>) -> ModelParams<f32> {
    ModelParams::init(config, classes, &mut ChaCha8Rng::seed_from_u64(0)).expect("valid config")
}

/// `flows` synthetic flows tokenized to the model's shape, with labels.
pub fn grids(config: &ModelConfig, flows: usize) -> (Vec<TokenGrid>, Vec<usize>) {
    let spec = SyntheticSpec { class_count: 4, flows_per_class: flows.div_ceil(4), ..Default::default() };
    let data = generate_token_dataset(&spec, SelectionPolicy::FirstK(config.packets), config.len).expect("valid spec");
    data.records
        .into_iter()
        .take(flows)
        .map(|r| (r.grid, r.label.unwrap_or(0) as usize))
        .unzip()
}

pub fn batch(config: &ModelConfig, flows: usize) -> TokenBatch {
    TokenBatch::from_grids(&grids(config, flows).0).expect("uniform grids")
}
