//! Optimization loop shared by both stages: AdamW with decoupled weight
//! decay, glob-based parameter freezing, seeded batch sampling, and a
//! central-difference gradient audit.

use std::collections::{BTreeMap, BTreeSet};

use glob::Pattern;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::{dataset_labels, finetune_objective, Pooling};
use crate::model::ModelParams;
use crate::params::Parameters;
use crate::pretrain::{pretrain_objective, LossWeights, MaskingConfig, PretrainBatch};
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::{TokenDataset, TokenGrid};

pub const DEFAULT_LEARNING_RATE: f64 = 2e-5;
/// Packet-stage attention blocks stay fixed while pre-training.
pub const DEFAULT_PRETRAIN_FREEZE: &str = "layers.*.packet_*";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear ramp from zero over this many steps; 0 keeps the rate constant.
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { learning_rate: DEFAULT_LEARNING_RATE, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, warmup_steps: 0 }
    }
}

impl AdamWConfig {
    /// Rate used on the 1-based step `t`.
    pub fn rate_at(&self, t: u64) -> f64 {
        if self.warmup_steps == 0 || t >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * t as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub freeze_patterns: Vec<String>,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub masking: MaskingConfig,
    pub pooling: Pooling,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            steps: 1000,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            freeze_patterns: vec![DEFAULT_PRETRAIN_FREEZE.to_string()],
            seed: 0,
            loss_weights: LossWeights::default(),
            masking: MaskingConfig::default(),
            pooling: Pooling::AllRows,
        }
    }

    pub fn finetune() -> Self {
        TrainConfig { stage: Stage::Finetune, batch_size: 64, freeze_patterns: Vec::new(), ..Self::pretrain() }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {}", o.learning_rate)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 || o.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("adamw coefficients out of range".into()));
        }
        let min_batch = if self.stage == Stage::Pretrain { 2 } else { 1 };
        if self.batch_size < min_batch {
            return Err(Error::InvalidConfig(format!("{} batch size must be at least {min_batch}", self.stage)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub first: Tensor<T>,
    pub second: Tensor<T>,
}

/// AdamW moments for every trainable parameter, keyed by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

/// One AdamW update with bias correction and decoupled weight decay.
/// Parameters named in `frozen` are left untouched and get no state.
pub fn adamw_step<T: Scalar, P: Parameters<T>>(
    params: &mut P,
    grads: &P,
    state: &mut OptimizerState<T>,
    cfg: &AdamWConfig,
    frozen: &BTreeSet<String>,
) {
    state.step += 1;
    let t = state.step;
    let lr = cfg.rate_at(t);
    let c1 = 1.0 - cfg.beta1.powi(t.min(i32::MAX as u64) as i32);
    let c2 = 1.0 - cfg.beta2.powi(t.min(i32::MAX as u64) as i32);
    let grads = grads.named();
    let mut idx = 0;
    params.visit_mut("", &mut |name, p| {
        let (gname, g) = &grads[idx];
        idx += 1;
        debug_assert_eq!(gname, name);
        if frozen.contains(name) {
            return;
        }
        let m = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| Moments { first: Tensor::zeros(&p.shape), second: Tensor::zeros(&p.shape) });
        let (b1, b2, eps, decay) = (cfg.beta1, cfg.beta2, cfg.eps, lr * cfg.weight_decay);
        for (((w, &gr), m1), m2) in p.data.iter_mut().zip(&g.data).zip(m.first.data.iter_mut()).zip(m.second.data.iter_mut()) {
            let gr = gr.to_f64().unwrap();
            let mf = b1 * m1.to_f64().unwrap() + (1.0 - b1) * gr;
            let vf = b2 * m2.to_f64().unwrap() + (1.0 - b2) * gr * gr;
            *m1 = T::lit(mf);
            *m2 = T::lit(vf);
            let mut wf = w.to_f64().unwrap();
            wf -= decay * wf;
            wf -= lr * (mf / c1) / ((vf / c2).sqrt() + eps);
            *w = T::lit(wf);
        }
    });
}

/// Parameters matched by the freeze patterns, plus the patterns that matched
/// nothing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FreezeSet {
    pub frozen: BTreeSet<String>,
    pub unmatched: Vec<String>,
}

pub fn freeze<T: Scalar>(params: &impl Parameters<T>, patterns: &[String]) -> Result<FreezeSet> {
    let compiled = patterns
        .iter()
        .map(|p| Pattern::new(p).map_err(|e| Error::InvalidPattern { pattern: p.clone(), reason: e.to_string() }))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let mut out = FreezeSet::default();
    for (pattern, raw) in compiled.iter().zip(patterns) {
        let hits: Vec<&String> = names.iter().filter(|n| pattern.matches(n)).collect();
        if hits.is_empty() {
            log::warn!("freeze pattern {raw:?} matches no parameter");
            out.unmatched.push(raw.clone());
        }
        out.frozen.extend(hits.into_iter().cloned());
    }
    Ok(out)
}

/// Per-step losses; the auxiliary fields are absent when fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub stage: Stage,
    pub step: u64,
    pub learning_rate: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mfp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prpp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fcl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fcl_mean: Option<f64>,
}

/// Serializable position of the batch-sampling generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub params: ModelParams<f32>,
    pub state: OptimizerState<f32>,
    pub frozen: BTreeSet<String>,
    rng: ChaCha8Rng,
    grads: ModelParams<f32>,
}

impl Trainer {
    pub fn new(config: TrainConfig, params: ModelParams<f32>) -> Result<Self> {
        config.validate()?;
        if config.stage == Stage::Finetune && params.classifier.is_none() {
            return Err(Error::InvalidConfig("fine-tuning needs a classifier head".into()));
        }
        let frozen = freeze(&params, &config.freeze_patterns)?.frozen;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let grads = params.zeros_like();
        Ok(Trainer { config, params, state: OptimizerState::default(), frozen, rng, grads })
    }

    /// Rebuilds a trainer mid-run from saved parts.
    pub fn resume(config: TrainConfig, params: ModelParams<f32>, state: OptimizerState<f32>, rng: RngState) -> Result<Self> {
        let mut t = Trainer::new(config, params)?;
        t.state = state;
        t.rng = rng.restore();
        Ok(t)
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn sample_indices(&mut self, n: usize) -> Result<Vec<usize>> {
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let k = self.config.batch_size.min(n);
        Ok(sample(&mut self.rng, n, k).into_vec())
    }

    /// Draws a batch from `dataset` and takes one optimizer step.
    pub fn step(&mut self, dataset: &TokenDataset) -> Result<StepMetrics> {
        let picks = self.sample_indices(dataset.len())?;
        let grids: Vec<TokenGrid> = picks.iter().map(|&i| dataset.records[i].grid.clone()).collect();
        match self.config.stage {
            Stage::Pretrain => self.pretrain_step(&grids),
            Stage::Finetune => {
                let classes = self.params.classifier.as_ref().map_or(0, |h| h.classes());
                let all = dataset_labels(dataset, classes)?;
                let labels: Vec<usize> = picks.iter().map(|&i| all[i]).collect();
                self.finetune_step(&grids, &labels)
            }
        }
    }

    pub fn pretrain_step(&mut self, grids: &[TokenGrid]) -> Result<StepMetrics> {
        let batch = PretrainBatch::prepare(grids, &self.config.masking, &mut self.rng)?;
        self.grads.zero_all();
        let loss = pretrain_objective(&self.params, &batch, self.config.loss_weights, Some(&mut self.grads))?;
        let step = self.state.step + 1;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("mfp={} prpp={} fcl={}", loss.mfp, loss.prpp, loss.fcl),
            });
        }
        self.apply();
        Ok(StepMetrics {
            stage: Stage::Pretrain,
            step,
            learning_rate: self.config.optimizer.rate_at(step),
            total: loss.total,
            mfp: Some(loss.mfp),
            prpp: Some(loss.prpp),
            fcl: Some(loss.fcl),
            fcl_mean: Some(loss.fcl_mean),
        })
    }

    pub fn finetune_step(&mut self, grids: &[TokenGrid], labels: &[usize]) -> Result<StepMetrics> {
        self.grads.zero_all();
        let loss = finetune_objective(&self.params, grids, labels, self.config.pooling, Some(&mut self.grads))?;
        let step = self.state.step + 1;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, detail: format!("cross-entropy={loss}") });
        }
        self.apply();
        Ok(StepMetrics {
            stage: Stage::Finetune,
            step,
            learning_rate: self.config.optimizer.rate_at(step),
            total: loss,
            mfp: None,
            prpp: None,
            fcl: None,
            fcl_mean: None,
        })
    }

    fn apply(&mut self) {
        adamw_step(&mut self.params, &self.grads, &mut self.state, &self.config.optimizer, &self.frozen);
    }

    /// Runs `steps` steps, reporting each.
    pub fn run(&mut self, dataset: &TokenDataset, steps: u64, mut on_step: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        let mut trace = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let m = self.step(dataset)?;
            on_step(&m);
            trace.push(m);
        }
        Ok(trace)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub step: f64,
    /// Coordinates compared per parameter tensor.
    pub coords_per_param: usize,
    /// Random candidates from which the largest-gradient coordinates are taken.
    pub candidates: usize,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// exactly zero compare by absolute difference.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { step: 1e-5, coords_per_param: 3, candidates: 256, floor: 1e-4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub entries: Vec<ParamCheck>,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn checked(&self) -> impl Iterator<Item = &ParamCheck> {
        self.entries.iter().filter(|e| !e.skipped)
    }
}

/// Adds uniform noise in `[-scale, scale)` to every parameter.
pub fn jitter<T: Scalar>(params: &mut impl Parameters<T>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params.visit_mut("", &mut |_, t| {
        for v in t.data.iter_mut() {
            *v += T::lit(rng.gen_range(-scale..scale));
        }
    });
}

fn set_coord<P: Parameters<f64>>(params: &mut P, name: &str, idx: usize, value: f64) -> f64 {
    let mut old = f64::NAN;
    params.visit_mut("", &mut |n, t| {
        if n == name {
            old = std::mem::replace(&mut t.data[idx], value);
        }
    });
    old
}

/// Compares the analytic gradient of `loss` with central differences
/// `(f(θ+h) − f(θ−h)) / 2h` on a sample of coordinates of every parameter.
/// `loss(params, grads)` must accumulate into `grads` when given.
pub fn gradcheck<P, F>(params: &mut P, frozen: &BTreeSet<String>, cfg: &GradcheckConfig, mut loss: F) -> Result<GradcheckReport>
where
    P: Parameters<f64> + Clone,
    F: FnMut(&P, Option<&mut P>) -> Result<f64>,
{
    let mut grads = params.clone();
    grads.zero_all();
    loss(params, Some(&mut grads))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let analytic: Vec<(String, Vec<f64>)> = grads.named().into_iter().map(|(n, t)| (n, t.data.clone())).collect();
    let mut entries = Vec::with_capacity(analytic.len());
    let mut overall = 0.0f64;
    for (name, g) in &analytic {
        if frozen.contains(name) {
            entries.push(ParamCheck { name: name.clone(), checked: 0, max_rel_error: 0.0, skipped: true });
            continue;
        }
        let mut cand: Vec<usize> = if g.len() <= cfg.candidates {
            (0..g.len()).collect()
        } else {
            sample(&mut rng, g.len(), cfg.candidates).into_vec()
        };
        cand.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
        cand.truncate(cfg.coords_per_param.max(1));
        if cand.len() > 1 && g.len() > cand.len() {
            // keep one uniformly random coordinate besides the largest ones
            let last = cand.len() - 1;
            cand[last] = rng.gen_range(0..g.len());
        }
        let mut worst = 0.0f64;
        for &i in &cand {
            let theta = set_coord(params, name, i, f64::NAN);
            set_coord(params, name, i, theta + cfg.step);
            let up = loss(params, None)?;
            set_coord(params, name, i, theta - cfg.step);
            let down = loss(params, None)?;
            set_coord(params, name, i, theta);
            let numeric = (up - down) / (2.0 * cfg.step);
            let denom = g[i].abs().max(numeric.abs()).max(cfg.floor);
            worst = worst.max((g[i] - numeric).abs() / denom);
        }
        overall = overall.max(worst);
        entries.push(ParamCheck { name: name.clone(), checked: cand.len(), max_rel_error: worst, skipped: false });
    }
    Ok(GradcheckReport { entries, max_rel_error: overall })
}
