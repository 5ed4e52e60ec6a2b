//! The two-level attention encoder.
//!
//! A flow enters as a `packets x len` grid of token ids and is embedded into a
//! `(batch, packets, len, dim)` activation tensor. Each layer first runs
//! self-attention inside every packet (over its `len` tokens, padding keys
//! masked) and then across packets at every token position (over the
//! `packets` slots). Both stages are post-norm transformer blocks with their
//! own weights.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Block, BlockCache, LayerNorm, Linear, SeqLayout};
use crate::params::{impl_parameters, join, Parameters};
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::{TokenGrid, PAD, VOCAB_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Packets per flow (N).
    pub packets: usize,
    /// Tokens per packet including `[CLS]` (L).
    pub len: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub layernorm_eps: f64,
}

impl ModelConfig {
    /// Full-size model: L=128, N=5, d=768, 12 layers.
    pub fn full() -> Self {
        ModelConfig {
            packets: 5,
            len: 128,
            dim: 768,
            layers: 12,
            heads: 12,
            mlp_hidden: 4 * 768,
            vocab_size: VOCAB_SIZE,
            layernorm_eps: 1e-12,
        }
    }

    /// CPU-sized model: L=32, N=5, d=64, 2 layers, 4 heads.
    pub fn desk() -> Self {
        ModelConfig {
            packets: 5,
            len: 32,
            dim: 64,
            layers: 2,
            heads: 4,
            mlp_hidden: 256,
            vocab_size: VOCAB_SIZE,
            layernorm_eps: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.packets == 0 || self.len < 2 || self.dim == 0 || self.heads == 0 {
            return bad(format!("degenerate shape {self:?}"));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.vocab_size == 0 || self.mlp_hidden == 0 {
            return bad("empty vocabulary or MLP".into());
        }
        if !(self.layernorm_eps > 0.0) {
            return bad(format!("layernorm_eps must be positive, got {}", self.layernorm_eps));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings<T> {
    /// `vocab_size x dim`; also the tied output matrix of the masked-token head.
    pub value: Tensor<T>,
    /// `len x dim`, indexed by position within the packet.
    pub position: Tensor<T>,
}
impl_parameters!(Embeddings { value, position });

/// One two-level attention layer. Parameter names use the stage as a prefix,
/// e.g. `packet_mhsa.q.weight` or `flow_ln2.gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct TlaLayer<T> {
    pub packet: Block<T>,
    pub flow: Block<T>,
}

impl<T: Scalar> Parameters<T> for TlaLayer<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        for (stem, b) in [("packet", &self.packet), ("flow", &self.flow)] {
            b.mhsa.visit(&join(prefix, &format!("{stem}_mhsa")), f);
            b.ln1.visit(&join(prefix, &format!("{stem}_ln1")), f);
            b.mlp.visit(&join(prefix, &format!("{stem}_mlp")), f);
            b.ln2.visit(&join(prefix, &format!("{stem}_ln2")), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        for (stem, b) in [("packet", &mut self.packet), ("flow", &mut self.flow)] {
            b.mhsa.visit_mut(&join(prefix, &format!("{stem}_mhsa")), f);
            b.ln1.visit_mut(&join(prefix, &format!("{stem}_ln1")), f);
            b.mlp.visit_mut(&join(prefix, &format!("{stem}_mlp")), f);
            b.ln2.visit_mut(&join(prefix, &format!("{stem}_ln2")), f);
        }
    }
}

/// `fc2(LayerNorm(GELU(fc1(x))))`, the shape shared by the order-prediction
/// and contrastive heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead<T> {
    pub fc1: Linear<T>,
    pub ln: LayerNorm<T>,
    pub fc2: Linear<T>,
}
impl_parameters!(ProjectionHead { fc1, ln, fc2 });

impl<T: Scalar> ProjectionHead<T> {
    pub fn zeros(dim: usize, out: usize) -> Self {
        ProjectionHead { fc1: Linear::zeros(dim, dim), ln: LayerNorm::identity(dim), fc2: Linear::zeros(dim, out) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmHead<T> {
    /// Per-vocabulary output bias; the weight is tied to `embeddings.value`.
    pub bias: Tensor<T>,
}
impl_parameters!(MlmHead { bias });

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainHeads<T> {
    pub mlm: MlmHead<T>,
    pub prpp: ProjectionHead<T>,
    pub fcl: ProjectionHead<T>,
}
impl_parameters!(PretrainHeads { mlm, prpp, fcl });

/// Flow classifier on the mean-pooled `[CLS]` vectors: `fc2(GELU(fc1(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}
impl_parameters!(ClassifierHead { fc1, fc2 });

impl<T: Scalar> ClassifierHead<T> {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        ClassifierHead { fc1: Linear::zeros(dim, dim), fc2: Linear::zeros(dim, classes) }
    }

    pub fn classes(&self) -> usize {
        self.fc2.output_dim()
    }
}

/// Every learnable weight of the model and its task heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub embeddings: Embeddings<T>,
    pub layers: Vec<TlaLayer<T>>,
    pub heads: PretrainHeads<T>,
    pub classifier: Option<ClassifierHead<T>>,
}

impl<T: Scalar> Parameters<T> for ModelParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.embeddings.visit(&join(prefix, "embeddings"), f);
        self.layers.visit(&join(prefix, "layers"), f);
        self.heads.visit(&join(prefix, "heads"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut Tensor<T>)) {
        self.embeddings.visit_mut(&join(prefix, "embeddings"), f);
        self.layers.visit_mut(&join(prefix, "layers"), f);
        self.heads.visit_mut(&join(prefix, "heads"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

impl<T: Scalar> ModelParams<T> {
    /// All weights zero, LayerNorm scales one. `classes` adds a classifier head.
    pub fn zeros(config: ModelConfig, classes: Option<usize>) -> Result<Self> {
        config.validate()?;
        if let Some(c) = classes {
            if c < 2 {
                return Err(Error::InvalidConfig(format!("classifier needs at least 2 classes, got {c}")));
            }
        }
        let d = config.dim;
        Ok(ModelParams {
            config,
            embeddings: Embeddings {
                value: Tensor::zeros(&[config.vocab_size, d]),
                position: Tensor::zeros(&[config.len, d]),
            },
            layers: (0..config.layers)
                .map(|_| TlaLayer { packet: Block::zeros(d, config.mlp_hidden), flow: Block::zeros(d, config.mlp_hidden) })
                .collect(),
            heads: PretrainHeads {
                mlm: MlmHead { bias: Tensor::zeros(&[config.vocab_size]) },
                prpp: ProjectionHead::zeros(d, 2),
                fcl: ProjectionHead::zeros(d, d),
            },
            classifier: classes.map(|c| ClassifierHead::zeros(d, c)),
        })
    }

    /// Truncated-normal (std 0.02, cut at two std) weights and embeddings,
    /// zero biases, unit LayerNorm scales.
    pub fn init<R: Rng>(config: ModelConfig, classes: Option<usize>, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(config, classes)?;
        p.visit_mut("", &mut |name, t| init_tensor(name, t, rng));
        Ok(p)
    }

    /// Replaces the classifier with a freshly initialized one.
    pub fn reset_classifier<R: Rng>(&mut self, classes: usize, rng: &mut R) -> Result<()> {
        if classes < 2 {
            return Err(Error::InvalidConfig(format!("classifier needs at least 2 classes, got {classes}")));
        }
        let mut head = ClassifierHead::zeros(self.config.dim, classes);
        head.visit_mut("classifier", &mut |name, t| init_tensor(name, t, rng));
        self.classifier = Some(head);
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_all();
        z
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(self.config, self.classifier.as_ref().map(|c| c.classes()))
            .expect("config already validated");
        crate::params::copy_cast(self, &mut out);
        out
    }
}

fn init_tensor<T: Scalar, R: Rng>(name: &str, t: &mut Tensor<T>, rng: &mut R) {
    if name.ends_with(".weight") || name.starts_with("embeddings.") {
        let normal = Normal::new(0.0, 0.02).unwrap();
        for v in t.data.iter_mut() {
            let mut x: f64 = normal.sample(rng);
            while x.abs() > 0.04 {
                x = normal.sample(rng);
            }
            *v = T::lit(x);
        }
    } else if name.ends_with(".gamma") {
        t.fill(T::one());
    } else {
        t.fill(T::zero());
    }
}

/// Activations of shape `(batch, packets, len, dim)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTensor<T> {
    pub batch: usize,
    pub packets: usize,
    pub len: usize,
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FlowTensor<T> {
    pub fn new(batch: usize, packets: usize, len: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != batch * packets * len * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape ({batch}, {packets}, {len}, {dim})",
                data.len()
            )));
        }
        Ok(FlowTensor { batch, packets, len, dim, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.packets, self.len, self.dim]
    }

    pub fn at(&self, b: usize, i: usize, j: usize) -> &[T] {
        let off = ((b * self.packets + i) * self.len + j) * self.dim;
        &self.data[off..off + self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn rows(&self) -> usize {
        self.batch * self.packets * self.len
    }
}

/// Flattened ids of a batch of equally shaped grids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub packets: usize,
    pub len: usize,
    pub ids: Vec<u32>,
}

impl TokenBatch {
    pub fn from_grids(grids: &[TokenGrid]) -> Result<Self> {
        let first = grids.first().ok_or(Error::EmptyDataset)?;
        let (packets, len) = (first.packets(), first.len());
        let mut ids = Vec::with_capacity(grids.len() * packets * len);
        for g in grids {
            if g.packets() != packets || g.len() != len {
                return Err(Error::ShapeMismatch(format!(
                    "grid {}x{} in a batch of {packets}x{len}",
                    g.packets(),
                    g.len()
                )));
            }
            ids.extend_from_slice(g.ids());
        }
        Ok(TokenBatch { batch: grids.len(), packets, len, ids })
    }

    /// Key-padding mask for packet attention: set where the token is `[PAD]`.
    pub fn pad_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id == PAD).collect()
    }
}

fn check_batch(config: &ModelConfig, batch: &TokenBatch) -> Result<()> {
    if batch.packets != config.packets || batch.len != config.len {
        return Err(Error::ShapeMismatch(format!(
            "grid {}x{} for a model of {}x{}",
            batch.packets, batch.len, config.packets, config.len
        )));
    }
    if let Some(&id) = batch.ids.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(Error::IdOutOfRange { id, vocab_size: config.vocab_size });
    }
    Ok(())
}

fn check_tensor<T: Scalar>(config: &ModelConfig, x: &FlowTensor<T>) -> Result<()> {
    if x.packets != config.packets || x.len != config.len || x.dim != config.dim || x.data.len() != x.rows() * x.dim {
        return Err(Error::ShapeMismatch(format!(
            "activation {:?} for a model of {}x{}x{}",
            x.shape(),
            config.packets,
            config.len,
            config.dim
        )));
    }
    Ok(())
}

/// `value[id] + position[j]` for every token, `j` its position inside its packet.
pub fn embed<T: Scalar>(params: &ModelParams<T>, batch: &TokenBatch) -> Result<FlowTensor<T>> {
    let cfg = &params.config;
    check_batch(cfg, batch)?;
    let d = cfg.dim;
    let mut data = Vec::with_capacity(batch.ids.len() * d);
    for (n, &id) in batch.ids.iter().enumerate() {
        let j = n % batch.len;
        let v = &params.embeddings.value.data[id as usize * d..(id as usize + 1) * d];
        let p = &params.embeddings.position.data[j * d..(j + 1) * d];
        data.extend(v.iter().zip(p).map(|(&a, &b)| a + b));
    }
    FlowTensor::new(batch.batch, batch.packets, batch.len, d, data)
}

/// Swaps the packet and position axes: `(B, N, L, d) <-> (B, L, N, d)`.
fn swap_middle<T: Scalar>(src: &[T], batch: usize, outer: usize, inner: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        let base = b * outer * inner * d;
        for o in 0..outer {
            for i in 0..inner {
                let s = base + (o * inner + i) * d;
                let t = base + (i * outer + o) * d;
                out[t..t + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}

fn packet_layout(cfg: &ModelConfig, batch: usize) -> SeqLayout {
    SeqLayout { seqs: batch * cfg.packets, seq_len: cfg.len, heads: cfg.heads }
}

fn flow_layout(cfg: &ModelConfig, batch: usize) -> SeqLayout {
    SeqLayout { seqs: batch * cfg.len, seq_len: cfg.packets, heads: cfg.heads }
}

fn debug_check_finite<T: Scalar>(data: &[T], what: &str) {
    debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite activation after {what}");
}

/// Self-attention among the tokens of each packet, then the packet MLP.
/// `pad_mask` marks `[PAD]` keys, which receive no attention.
pub fn packet_attention_block<T: Scalar>(
    params: &ModelParams<T>,
    layer: usize,
    x: &FlowTensor<T>,
    pad_mask: Option<&[bool]>,
) -> Result<FlowTensor<T>> {
    let cfg = &params.config;
    check_tensor(cfg, x)?;
    let block = &params.layers.get(layer).ok_or_else(|| Error::ShapeMismatch(format!("no layer {layer}")))?.packet;
    let (y, _, _) = block.forward(x.data.clone(), packet_layout(cfg, x.batch), pad_mask, T::lit(cfg.layernorm_eps));
    FlowTensor::new(x.batch, x.packets, x.len, x.dim, y)
}

/// Self-attention across the packets at each token position, then the flow MLP.
pub fn flow_attention_block<T: Scalar>(params: &ModelParams<T>, layer: usize, x: &FlowTensor<T>) -> Result<FlowTensor<T>> {
    let cfg = &params.config;
    check_tensor(cfg, x)?;
    let block = &params.layers.get(layer).ok_or_else(|| Error::ShapeMismatch(format!("no layer {layer}")))?.flow;
    let xt = swap_middle(&x.data, x.batch, x.packets, x.len, x.dim);
    let (yt, _, _) = block.forward(xt, flow_layout(cfg, x.batch), None, T::lit(cfg.layernorm_eps));
    let y = swap_middle(&yt, x.batch, x.len, x.packets, x.dim);
    FlowTensor::new(x.batch, x.packets, x.len, x.dim, y)
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    packet: BlockCache<T>,
    flow: BlockCache<T>,
}

/// Everything the backward pass needs from one encoder forward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    batch: TokenBatch,
    layers: Vec<LayerCache<T>>,
    attention_macs: u64,
}

impl<T> EncoderCache<T> {
    /// Multiply-accumulates executed for attention scores and value mixing.
    pub fn attention_macs(&self) -> u64 {
        self.attention_macs
    }

    pub fn batch(&self) -> &TokenBatch {
        &self.batch
    }
}

/// Embedding followed by every two-level attention layer.
pub fn encode_flow<T: Scalar>(params: &ModelParams<T>, batch: &TokenBatch) -> Result<FlowTensor<T>> {
    encode_flow_cached(params, batch).map(|(x, _)| x)
}

pub fn encode_flow_cached<T: Scalar>(params: &ModelParams<T>, batch: &TokenBatch) -> Result<(FlowTensor<T>, EncoderCache<T>)> {
    let cfg = params.config;
    let x = embed(params, batch)?;
    let (b, n, l, d) = (x.batch, cfg.packets, cfg.len, cfg.dim);
    let eps = T::lit(cfg.layernorm_eps);
    let mask = batch.pad_mask();
    let mut data = x.data;
    let mut layers = Vec::with_capacity(cfg.layers);
    let mut macs = 0;
    for layer in &params.layers {
        let (y, packet, m1) = layer.packet.forward(data, packet_layout(&cfg, b), Some(&mask), eps);
        debug_check_finite(&y, "packet attention");
        let yt = swap_middle(&y, b, n, l, d);
        let (zt, flow, m2) = layer.flow.forward(yt, flow_layout(&cfg, b), None, eps);
        debug_check_finite(&zt, "flow attention");
        data = swap_middle(&zt, b, l, n, d);
        macs += m1 + m2;
        layers.push(LayerCache { packet, flow });
    }
    let out = FlowTensor::new(b, n, l, d, data)?;
    Ok((out, EncoderCache { batch: batch.clone(), layers, attention_macs: macs }))
}

/// Accumulates encoder parameter gradients given `d_out`, the gradient of the
/// objective with respect to the encoder output.
pub fn encode_backward<T: Scalar>(params: &ModelParams<T>, grads: &mut ModelParams<T>, cache: &EncoderCache<T>, d_out: Vec<T>) {
    let cfg = params.config;
    let b = cache.batch.batch;
    let (n, l, d) = (cfg.packets, cfg.len, cfg.dim);
    let mut dx = d_out;
    for ((layer, lc), g) in params.layers.iter().zip(&cache.layers).zip(grads.layers.iter_mut()).rev() {
        let dxt = swap_middle(&dx, b, n, l, d);
        let dyt = layer.flow.backward(&mut g.flow, &lc.flow, &dxt, flow_layout(&cfg, b));
        let dy = swap_middle(&dyt, b, l, n, d);
        dx = layer.packet.backward(&mut g.packet, &lc.packet, &dy, packet_layout(&cfg, b));
    }
    let value = &mut grads.embeddings.value.data;
    let position = &mut grads.embeddings.position.data;
    for (row, (&id, g)) in cache.batch.ids.iter().zip(dx.chunks_exact(d)).enumerate() {
        let j = row % l;
        for c in 0..d {
            value[id as usize * d + c] += g[c];
            position[j * d + c] += g[c];
        }
    }
}

/// The `[CLS]` vector of every packet, shape `(batch, packets, dim)`.
pub fn extract_cls<T: Scalar>(x: &FlowTensor<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(x.batch * x.packets * x.dim);
    for b in 0..x.batch {
        for i in 0..x.packets {
            out.extend_from_slice(x.at(b, i, 0));
        }
    }
    out
}

/// Scatters a `(batch, packets, dim)` gradient back onto token position 0.
pub fn scatter_cls_grad<T: Scalar>(d_out: &mut [T], d_cls: &[T], batch: usize, packets: usize, len: usize, dim: usize) {
    for b in 0..batch {
        for i in 0..packets {
            let src = &d_cls[(b * packets + i) * dim..(b * packets + i + 1) * dim];
            let off = (b * packets + i) * len * dim;
            for (g, &s) in d_out[off..off + dim].iter_mut().zip(src) {
                *g += s;
            }
        }
    }
}

/// Baseline for comparison: the packet-stage blocks applied to the whole flow
/// flattened into one sequence of `packets * len` tokens. Returns the output
/// and attention multiply-accumulates.
pub fn encode_flat<T: Scalar>(params: &ModelParams<T>, batch: &TokenBatch) -> Result<(FlowTensor<T>, u64)> {
    let cfg = params.config;
    let x = embed(params, batch)?;
    let mask = batch.pad_mask();
    let lay = SeqLayout { seqs: x.batch, seq_len: cfg.packets * cfg.len, heads: cfg.heads };
    let mut data = x.data;
    let mut macs = 0;
    for layer in &params.layers {
        let (y, _, m) = layer.packet.forward(data, lay, Some(&mask), T::lit(cfg.layernorm_eps));
        data = y;
        macs += m;
    }
    Ok((FlowTensor::new(x.batch, cfg.packets, cfg.len, cfg.dim, data)?, macs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionMode {
    /// Packet attention then flow attention.
    TwoLevel,
    /// One sequence of `packets * len` tokens.
    Flat,
}

/// Attention cost of one layer for one flow, constant factors dropped:
/// `N·L²·d + L·N²·d` for two-level attention and `N²·L²·d` for flat attention.
pub fn count_attention_flops(config: &ModelConfig, mode: AttentionMode) -> u64 {
    let (n, l, d) = (config.packets as u64, config.len as u64, config.dim as u64);
    match mode {
        AttentionMode::TwoLevel => n * l * l * d + l * n * n * d,
        AttentionMode::Flat => n * n * l * l * d,
    }
}

/// Flat-over-two-level cost ratio.
pub fn attention_speedup(config: &ModelConfig) -> f64 {
    count_attention_flops(config, AttentionMode::Flat) as f64 / count_attention_flops(config, AttentionMode::TwoLevel) as f64
}

/// Enumerates every (sequence, query, key, channel) step of one layer's score
/// computation and counts it. Slow; meant for small shapes.
pub fn count_attention_macs_by_loop(config: &ModelConfig, mode: AttentionMode) -> u64 {
    let stages: Vec<(usize, usize)> = match mode {
        AttentionMode::TwoLevel => vec![(config.packets, config.len), (config.len, config.packets)],
        AttentionMode::Flat => vec![(1, config.packets * config.len)],
    };
    let mut count = 0u64;
    for (seqs, seq_len) in stages {
        for _seq in 0..seqs {
            for _query in 0..seq_len {
                for _key in 0..seq_len {
                    for _channel in 0..config.dim {
                        count += 1;
                    }
                }
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::build_token_grid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig { packets: 3, len: 6, dim: 8, layers: 2, heads: 2, mlp_hidden: 16, vocab_size: VOCAB_SIZE, layernorm_eps: 1e-12 }
    }

    fn batch(cfg: &ModelConfig) -> TokenBatch {
        let g = build_token_grid(&[vec![1u8, 2, 3, 4, 5, 6, 7], vec![9, 9, 9], vec![7, 1]], cfg.packets, cfg.len).unwrap();
        TokenBatch::from_grids(&[g]).unwrap()
    }

    #[test]
    fn names_follow_the_freeze_contract() {
        let p = ModelParams::<f32>::zeros(tiny(), Some(3)).unwrap();
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"embeddings.value".to_string()));
        assert!(names.contains(&"layers.1.packet_mhsa.q.weight".to_string()));
        assert!(names.contains(&"layers.0.flow_ln2.gamma".to_string()));
        assert!(names.contains(&"heads.mlm.bias".to_string()));
        assert!(names.contains(&"heads.prpp.fc2.weight".to_string()));
        assert!(names.contains(&"classifier.fc2.bias".to_string()));
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { heads: 3, ..ModelConfig::desk() }.validate().is_err());
        ModelConfig::desk().validate().unwrap();
        ModelConfig::full().validate().unwrap();
        assert!(ModelParams::<f32>::zeros(tiny(), Some(1)).is_err());
    }

    #[test]
    fn embedding_is_additive() {
        let cfg = tiny();
        let p = ModelParams::<f64>::init(cfg, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = build_token_grid(&[vec![5u8, 5, 5]], cfg.packets, cfg.len).unwrap();
        // same content token at positions 1 and 2, identical padding rows 1 and 2
        let x = embed(&p, &TokenBatch::from_grids(&[g.clone()]).unwrap()).unwrap();
        let pos = &p.embeddings.position.data;
        for c in 0..cfg.dim {
            let diff = x.at(0, 0, 2)[c] - x.at(0, 0, 1)[c];
            assert!((diff - (pos[2 * cfg.dim + c] - pos[cfg.dim + c])).abs() < 1e-15);
        }
        assert_eq!(x.at(0, 1, 0), x.at(0, 2, 0));
        g.ids_mut()[0] = VOCAB_SIZE as u32;
        assert!(matches!(
            embed(&p, &TokenBatch::from_grids(&[g]).unwrap()),
            Err(Error::IdOutOfRange { .. })
        ));
        let z = ModelParams::<f64>::zeros(cfg, None).unwrap();
        assert!(embed(&z, &batch(&cfg)).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_layers_is_embedding() {
        let cfg = ModelConfig { layers: 0, ..tiny() };
        let p = ModelParams::<f32>::init(cfg, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = batch(&cfg);
        assert_eq!(encode_flow(&p, &b).unwrap(), embed(&p, &b).unwrap());
    }

    #[test]
    fn instrumented_macs_match_formula() {
        let cfg = tiny();
        let p = ModelParams::<f32>::init(cfg, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let g = batch(&cfg);
        let two = TokenBatch { batch: 2, packets: g.packets, len: g.len, ids: [g.ids.clone(), g.ids.clone()].concat() };
        let (_, cache) = encode_flow_cached(&p, &two).unwrap();
        let per_layer = 2 * count_attention_flops(&cfg, AttentionMode::TwoLevel);
        assert_eq!(cache.attention_macs(), 2 * cfg.layers as u64 * per_layer);
        let (_, flat) = encode_flat(&p, &two).unwrap();
        assert_eq!(flat, 2 * cfg.layers as u64 * 2 * count_attention_flops(&cfg, AttentionMode::Flat));
    }

    #[test]
    fn speedup_identities() {
        let full = ModelConfig::full();
        assert_eq!(count_attention_flops(&ModelConfig { dim: 1, ..full }, AttentionMode::Flat), 409_600);
        assert_eq!(count_attention_flops(&ModelConfig { dim: 1, ..full }, AttentionMode::TwoLevel), 85_120);
        let square = ModelConfig { packets: 16, len: 16, ..ModelConfig::desk() };
        assert!((attention_speedup(&square) - 8.0).abs() < 1e-12);
        let single = ModelConfig { packets: 1, ..ModelConfig::desk() };
        let l = single.len as f64;
        assert!((attention_speedup(&single) - l * l / (l * l + l)).abs() < 1e-12);
    }

    #[test]
    fn cls_extraction() {
        let x = FlowTensor::new(2, 5, 32, 64, (0..2 * 5 * 32 * 64).map(|v| v as f32).collect()).unwrap();
        let cls = extract_cls(&x);
        assert_eq!(cls.len(), 2 * 5 * 64);
        assert_eq!(&cls[64..128], x.at(0, 1, 0));
        assert_eq!(&cls[5 * 64..6 * 64], x.at(1, 0, 0));
    }
}
