use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use miett_core::checkpoint::{Checkpoint, TrainingState};
use miett_core::finetune::{dataset_labels, evaluate as score, finetune_objective, Pooling};
use miett_core::ingest::{
    apply_labels, parse_pcap, read_label_file, segment_flows, select_packets, write_hex_flows, write_label_file, HexFlow,
    SelectionPolicy,
};
use miett_core::model::{
    attention_speedup, count_attention_flops, count_attention_macs_by_loop, encode_flat, encode_flow, AttentionMode,
};
use miett_core::pretrain::{pretrain_objective, LossWeights, MaskingConfig, PretrainBatch};
use miett_core::synthetic::{generate_pcap, generate_token_dataset, SyntheticSpec};
use miett_core::tokenizer::{tokenize_flows, TokenDataset};
use miett_core::trainer::{gradcheck as check_gradients, jitter, GradcheckConfig, Stage, StepMetrics, TrainConfig, Trainer};
use miett_core::{Error, ModelConfig, ModelParams, TokenBatch, TokenGrid};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::settings::{ModelArgs, Preset, TrainArgs};
use crate::{read_bytes, CliError, Context};

const DEFAULT_POLICY: &str = "first:5";
const DEFAULT_LEN: usize = 128;
const DEFAULT_LOG_EVERY: u64 = 10;

fn parse_enum<T: DeserializeOwned>(text: &str, what: &str) -> Result<T, CliError> {
    serde_json::from_value(Value::String(text.to_string())).map_err(|_| CliError::Usage(format!("unknown {what} {text:?}")))
}

fn required<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T, CliError> {
    value.as_ref().ok_or_else(|| CliError::Usage(format!("{flag} is required")))
}

fn parse_policy(text: &str, seed: u64) -> Result<SelectionPolicy, CliError> {
    let policy: SelectionPolicy = text.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    Ok(policy.reseeded(seed))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<TokenDataset, CliError> {
    Ok(TokenDataset::from_bytes(&read_bytes(path)?)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Ok(Checkpoint::from_bytes(&read_bytes(path)?)?)
}

fn save_dataset(ds: &TokenDataset, path: &Path) -> Result<(), CliError> {
    let mut w = create(path)?;
    ds.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct PreprocessArgs {
    /// Classic pcap capture with Ethernet framing.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Token dataset to write.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Tab-separated `flow key<TAB>label` lines.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Packet selection: first:K or random:KofM.
    #[arg(long)]
    pub packets: Option<String>,
    /// Tokens per packet, counting the leading [CLS].
    #[arg(long)]
    pub len: Option<usize>,
    /// Also write the selected, anonymized packets as hex text.
    #[arg(long)]
    pub hex: Option<PathBuf>,
}

pub fn preprocess(ctx: &Context, flags: PreprocessArgs) -> Result<(), CliError> {
    let mut a = ctx.file.resolve("preprocess", &flags)?;
    a.packets.get_or_insert_with(|| DEFAULT_POLICY.to_string());
    a.len.get_or_insert(DEFAULT_LEN);
    ctx.log_config("preprocess", &a);
    let (input, output) = (required(&a.input, "--input")?, required(&a.output, "--output")?);
    let policy = parse_policy(a.packets.as_deref().unwrap_or(DEFAULT_POLICY), ctx.seed)?;
    let len = a.len.unwrap_or(DEFAULT_LEN);

    let capture = read_bytes(input)?;
    let label_map = match &a.labels {
        Some(path) => {
            let file = File::open(path).map_err(|e| crate::open_error(path, e))?;
            Some(read_label_file(BufReader::new(file))?)
        }
        None => None,
    };
    let records = parse_pcap(&capture)?;
    let seg = segment_flows(&records);
    let mut flows = seg.flows;
    let unlabeled = match &label_map {
        Some(map) => apply_labels(&mut flows, map),
        None => flows.len(),
    };
    if label_map.is_some() && unlabeled > 0 {
        log::warn!("{unlabeled} flows have no entry in the label file");
    }
    let ds = tokenize_flows(&flows, policy, len)?;
    save_dataset(&ds, output)?;

    if let Some(path) = &a.hex {
        let mut hex = Vec::with_capacity(flows.len());
        for (i, flow) in flows.iter().enumerate() {
            let policy = match policy {
                SelectionPolicy::RandomKofFirstM { seed, .. } => policy.reseeded(seed.wrapping_add(i as u64)),
                p => p,
            };
            let packets = select_packets(flow, policy)?.into_iter().map(|p| p.bytes).collect();
            hex.push(HexFlow { label: flow.label, packets });
        }
        let mut w = create(path)?;
        write_hex_flows(&mut w, &hex)?;
        w.flush()?;
    }

    let s = seg.stats;
    println!("captured_packets {}", records.len());
    println!("admitted_packets {}", s.admitted);
    println!("dropped_non_ipv4 {}", s.non_ipv4);
    println!("dropped_non_tcp_udp {}", s.non_tcp_udp);
    println!("dropped_malformed {}", s.malformed);
    println!("flows {}", flows.len());
    println!("unlabeled_flows {unlabeled}");
    println!("records {}", ds.len());
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct SynthArgs {
    /// Directory for `capture.pcap` and `labels.tsv`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub flows_per_class: Option<usize>,
    #[arg(long)]
    pub packets_min: Option<usize>,
    #[arg(long)]
    pub packets_max: Option<usize>,
    #[arg(long)]
    pub payload_min: Option<usize>,
    #[arg(long)]
    pub payload_max: Option<usize>,
    /// Fraction of packets per flow without the class motif.
    #[arg(long)]
    pub noise_rate: Option<f64>,
    /// Also write a token dataset generated directly, without the capture.
    #[arg(long)]
    pub tokens: Option<PathBuf>,
    /// Packet selection for `--tokens`.
    #[arg(long)]
    pub packets: Option<String>,
    /// Tokens per packet for `--tokens`.
    #[arg(long)]
    pub len: Option<usize>,
}

pub fn synth(ctx: &Context, flags: SynthArgs) -> Result<(), CliError> {
    let a = ctx.file.resolve("synth", &flags)?;
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        class_count: a.classes.unwrap_or(d.class_count),
        flows_per_class: a.flows_per_class.unwrap_or(d.flows_per_class),
        packets_min: a.packets_min.unwrap_or(d.packets_min),
        packets_max: a.packets_max.unwrap_or(d.packets_max),
        payload_min: a.payload_min.unwrap_or(d.payload_min),
        payload_max: a.payload_max.unwrap_or(d.payload_max),
        noise_rate: a.noise_rate.unwrap_or(d.noise_rate),
        seed: ctx.seed,
        ..d
    };
    ctx.log_config("synth", &serde_json::json!({ "spec": spec, "args": a }));
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let dir = required(&a.out_dir, "--out-dir")?;
    fs::create_dir_all(dir)?;

    let (pcap, labels) = generate_pcap(&spec)?;
    fs::write(dir.join("capture.pcap"), &pcap)?;
    let mut w = create(&dir.join("labels.tsv"))?;
    write_label_file(&mut w, &labels)?;
    w.flush()?;
    println!("flows {}", labels.len());
    println!("capture_bytes {}", pcap.len());

    if let Some(path) = &a.tokens {
        let policy = parse_policy(a.packets.as_deref().unwrap_or(DEFAULT_POLICY), ctx.seed)?;
        let ds = generate_token_dataset(&spec, policy, a.len.unwrap_or(DEFAULT_LEN))?;
        save_dataset(&ds, path)?;
        println!("records {}", ds.len());
    }
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct TrainCommand {
    /// Token dataset from `preprocess` or `synth --tokens`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub output: PathBuf,
    /// Start from the weights of this checkpoint.
    #[arg(long, conflicts_with = "resume")]
    pub init: Option<PathBuf>,
    /// Continue a run from its checkpoint, optimizer and RNG state included.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Classifier classes when fine-tuning; defaults to the dataset's labels.
    #[arg(long)]
    pub classes: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

fn apply_train_args(cfg: &mut TrainConfig, a: &TrainArgs) -> Result<(), CliError> {
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.optimizer.learning_rate = v;
    }
    if let Some(v) = a.weight_decay {
        cfg.optimizer.weight_decay = v;
    }
    if let Some(v) = a.warmup_steps {
        cfg.optimizer.warmup_steps = v;
    }
    if let Some(patterns) = &a.freeze {
        cfg.freeze_patterns = patterns.iter().filter(|p| p.as_str() != "none").cloned().collect();
    }
    if let Some(v) = &a.pooling {
        cfg.pooling = parse_enum(v, "pooling")?;
    }
    if let Some(v) = a.alpha {
        cfg.loss_weights.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.loss_weights.beta = v;
    }
    if let Some(v) = a.mask_ratio {
        cfg.masking.ratio = v;
    }
    if let Some(v) = &a.mask_policy {
        cfg.masking.policy = parse_enum(v, "mask policy")?;
    }
    if let Some(v) = a.shuffle_packets {
        cfg.masking.shuffle_packets = v;
    }
    Ok(())
}

/// Reshapes dataset grids to the model's packet count. Pre-training draws
/// `n` of the first `2n` real rows per flow when the grid holds that many;
/// otherwise the first `n` rows are kept.
fn fit_rows(ds: &TokenDataset, packets: usize, stage: Stage, seed: u64) -> Result<TokenDataset, CliError> {
    if ds.packets == packets {
        return Ok(ds.clone());
    }
    let mut out = TokenDataset::new(packets, ds.len);
    let sampled = stage == Stage::Pretrain && ds.packets >= 2 * packets;
    log::info!(
        "dataset has {} packet rows, model takes {packets}: using {}",
        ds.packets,
        if sampled { format!("random:{packets}of{}", 2 * packets) } else { format!("first:{packets}") }
    );
    for (i, rec) in ds.records.iter().enumerate() {
        let real = rec.grid.real_rows();
        let rows: Vec<usize> = if sampled && real > packets {
            let pool = real.min(2 * packets);
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let mut picked = sample(&mut rng, pool, packets).into_vec();
            picked.sort_unstable();
            picked
        } else {
            (0..packets.min(ds.packets)).collect()
        };
        out.push(rec.label, rec.grid.gather_rows(&rows, packets)?)?;
    }
    Ok(out)
}

struct MetricsSink {
    file: Option<BufWriter<File>>,
    every: u64,
    last: u64,
}

impl MetricsSink {
    fn record(&mut self, m: &StepMetrics) -> Result<(), CliError> {
        let line = serde_json::to_string(m).map_err(|e| CliError::Failed(e.to_string()))?;
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}")?;
        }
        if m.step.is_multiple_of(self.every) || m.step == self.last {
            println!("{line}");
        }
        Ok(())
    }
}

pub fn train(ctx: &Context, stage: Stage, cmd: TrainCommand) -> Result<(), CliError> {
    let section = stage.to_string();
    let ta = ctx.file.resolve(&section, &cmd.train)?;
    let ma = ctx.file.resolve("model", &cmd.model)?;
    let dataset = load_dataset(&cmd.dataset)?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(ctx.seed);

    let (mut params, config, resume_state) = if let Some(path) = &cmd.resume {
        let ckpt = load_checkpoint(path)?;
        let state = ckpt.training.ok_or_else(|| CliError::Usage(format!("{} holds no training state", path.display())))?;
        if state.config.stage != stage {
            return Err(CliError::Usage(format!("{} is a {} checkpoint", path.display(), state.config.stage)));
        }
        let mut config = state.config.clone();
        apply_train_args(&mut config, &ta)?;
        (ckpt.params, config, Some(state))
    } else {
        let params = match &cmd.init {
            Some(path) => load_checkpoint(path)?.params,
            None => {
                let mut cfg = ma.build(Preset::Desk);
                if ma.len.is_none() {
                    cfg.len = dataset.len;
                }
                ModelParams::init(cfg, None, &mut init_rng)?
            }
        };
        let mut config = match stage {
            Stage::Pretrain => TrainConfig::pretrain(),
            Stage::Finetune => TrainConfig::finetune(),
        };
        config.seed = ctx.seed;
        apply_train_args(&mut config, &ta)?;
        (params, config, None)
    };
    if (cmd.init.is_some() || cmd.resume.is_some()) && ma.any_set() {
        let mut wanted = ma.build(Preset::Desk);
        if ma.len.is_none() {
            wanted.len = params.config.len;
        }
        if wanted != params.config {
            return Err(CliError::Usage("model flags disagree with the checkpoint's model".into()));
        }
    }
    if dataset.len != params.config.len {
        return Err(Error::ShapeMismatch(format!("dataset rows hold {} tokens, model expects {}", dataset.len, params.config.len)).into());
    }

    if stage == Stage::Finetune {
        let needed = dataset.class_count();
        if needed == 0 {
            return Err(CliError::Usage("fine-tuning needs a labeled dataset".into()));
        }
        let classes = cmd.classes.unwrap_or(needed);
        if classes < needed {
            return Err(Error::ClassCountMismatch { head: classes, dataset: needed }.into());
        }
        match &params.classifier {
            Some(head) if head.classes() != classes => {
                return Err(Error::ClassCountMismatch { head: head.classes(), dataset: classes }.into())
            }
            Some(_) => {}
            None => params.reset_classifier(classes, &mut init_rng)?,
        }
    } else if cmd.classes.is_some() {
        log::warn!("--classes has no effect when pre-training");
    }

    let data = fit_rows(&dataset, params.config.packets, stage, config.seed)?;
    let done = resume_state.as_ref().map_or(0, |s| s.optimizer.step);
    let remaining = config.steps.saturating_sub(done);
    ctx.log_config(
        &section,
        &serde_json::json!({
            "dataset": cmd.dataset,
            "records": data.len(),
            "output": cmd.output,
            "init": cmd.init,
            "resume": cmd.resume,
            "model": params.config,
            "train": config,
            "completed_steps": done,
        }),
    );

    let mut trainer = match resume_state {
        Some(state) => {
            config.validate()?;
            Trainer::resume(config, params, state.optimizer, state.rng)?
        }
        None => Trainer::new(config, params)?,
    };
    let file = match &ta.metrics {
        Some(path) => Some(BufWriter::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?,
        )),
        None => None,
    };
    let mut sink = MetricsSink { file, every: ta.log_every.unwrap_or(DEFAULT_LOG_EVERY).max(1), last: done + remaining };
    let start = Instant::now();
    let mut sink_error = None;
    trainer.run(&data, remaining, |m| {
        if let Err(e) = sink.record(m) {
            sink_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = sink_error {
        return Err(e);
    }
    if let Some(f) = &mut sink.file {
        f.flush()?;
    }

    let ckpt = Checkpoint {
        training: Some(TrainingState { config: trainer.config.clone(), optimizer: trainer.state.clone(), rng: trainer.rng_state() }),
        params: trainer.params,
    };
    ckpt.save(&cmd.output)?;
    log::info!(
        "{section}: {remaining} steps in {:.1?}, checkpoint written to {}",
        start.elapsed(),
        cmd.output.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// all_rows or real_rows; defaults to the pooling the checkpoint was trained with.
    #[arg(long)]
    pub pooling: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Fine-tuned checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
    /// Also write the JSON report to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub settings: EvalSettings,
}

pub fn evaluate(ctx: &Context, a: EvaluateArgs) -> Result<(), CliError> {
    let s = ctx.file.resolve("evaluate", &a.settings)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let dataset = load_dataset(&a.dataset)?;
    let head = ckpt
        .params
        .classifier
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("{} has no classifier head", a.checkpoint.display())))?;
    let classes = head.classes();
    let needed = dataset.class_count();
    if needed == 0 {
        return Err(CliError::Usage("evaluation needs a labeled dataset".into()));
    }
    if needed > classes {
        return Err(Error::ClassCountMismatch { head: classes, dataset: needed }.into());
    }
    let trained_pooling = ckpt.training.as_ref().map_or(Pooling::AllRows, |t| t.config.pooling);
    let pooling = match &s.pooling {
        Some(p) => parse_enum(p, "pooling")?,
        None => trained_pooling,
    };
    let batch_size = s.batch_size.unwrap_or(64).max(1);
    ctx.log_config(
        "evaluate",
        &serde_json::json!({ "dataset": a.dataset, "checkpoint": a.checkpoint, "batch_size": batch_size, "pooling": pooling }),
    );
    if dataset.len != ckpt.params.config.len {
        return Err(Error::ShapeMismatch(format!("dataset rows hold {} tokens, model expects {}", dataset.len, ckpt.params.config.len)).into());
    }
    let data = fit_rows(&dataset, ckpt.params.config.packets, Stage::Finetune, ctx.seed)?;
    dataset_labels(&data, classes)?;
    let report = score(&ckpt.params, &data, batch_size, pooling)?;
    let json = serde_json::to_string(&report).map_err(|e| CliError::Failed(e.to_string()))?;
    if a.json {
        println!("{json}");
    } else {
        print!("{}", report.to_text());
    }
    if let Some(path) = &a.report {
        fs::write(path, format!("{json}\n"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSettings {
    /// pretrain (combined loss) or finetune (classification loss).
    #[arg(long)]
    pub stage: Option<String>,
    /// Flows in the probe batch.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Uniform noise added to every weight before checking.
    #[arg(long)]
    pub jitter: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Coordinates compared per tensor.
    #[arg(long)]
    pub coords: Option<usize>,
    /// Central-difference step.
    #[arg(long)]
    pub step: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub settings: GradcheckSettings,
}

pub fn gradcheck(ctx: &Context, a: GradcheckArgs) -> Result<(), CliError> {
    let s = ctx.file.resolve("gradcheck", &a.settings)?;
    let model = ctx.file.resolve("model", &a.model)?.build(Preset::Desk);
    model.validate()?;
    let stage: Stage = parse_enum(s.stage.as_deref().unwrap_or("pretrain"), "stage")?;
    let batch = s.batch.unwrap_or(2).max(2);
    let tolerance = s.tolerance.unwrap_or(1e-4);
    let d = GradcheckConfig::default();
    let cfg = GradcheckConfig {
        step: s.step.unwrap_or(d.step),
        coords_per_param: s.coords.unwrap_or(d.coords_per_param),
        seed: ctx.seed,
        ..d
    };
    ctx.log_config(
        "gradcheck",
        &serde_json::json!({ "model": model, "stage": stage, "batch": batch, "jitter": s.jitter, "tolerance": tolerance, "step": cfg.step, "coords": cfg.coords_per_param }),
    );

    let spec = SyntheticSpec { class_count: 2, flows_per_class: batch.div_ceil(2), seed: ctx.seed, ..Default::default() };
    let data = generate_token_dataset(&spec, SelectionPolicy::FirstK(model.packets), model.len)?;
    let grids: Vec<TokenGrid> = data.records.iter().take(batch).map(|r| r.grid.clone()).collect();
    let labels: Vec<usize> = data.records.iter().take(batch).map(|r| r.label.unwrap_or(0) as usize).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let classes = (stage == Stage::Finetune).then_some(2);
    let mut params = ModelParams::<f32>::init(model, classes, &mut rng)?.cast::<f64>();
    if let Some(scale) = s.jitter.filter(|&j| j > 0.0) {
        jitter(&mut params, scale, ctx.seed);
    }
    let start = Instant::now();
    let report = match stage {
        Stage::Pretrain => {
            let prepared = PretrainBatch::prepare(&grids, &MaskingConfig::default(), &mut rng)?;
            check_gradients(&mut params, &BTreeSet::new(), &cfg, |p, g| {
                Ok(pretrain_objective(p, &prepared, LossWeights::default(), g)?.total)
            })?
        }
        Stage::Finetune => check_gradients(&mut params, &BTreeSet::new(), &cfg, |p, g| {
            finetune_objective(p, &grids, &labels, Pooling::AllRows, g)
        })?,
    };
    for e in &report.entries {
        if e.skipped {
            println!("{:<40} skipped", e.name);
        } else {
            println!("{:<40} {:>3} coords  max_rel_error {:.3e}", e.name, e.checked, e.max_rel_error);
        }
    }
    println!("max_rel_error {:.3e} (tolerance {tolerance:.0e}, {:.1?})", report.max_rel_error, start.elapsed());
    if report.max_rel_error < tolerance {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed: {:.3e} >= {tolerance:.0e}", report.max_rel_error)))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSettings {
    /// Also time both encoders on random flows.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub measure: Option<bool>,
    /// Cross-check the analytic counts with an explicit loop.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub verify: Option<bool>,
    /// Flows per timed forward pass.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub settings: BenchmarkSettings,
}

fn best_of<F: FnMut() -> Result<(), CliError>>(repeats: usize, mut f: F) -> Result<f64, CliError> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

pub fn benchmark(ctx: &Context, a: BenchmarkArgs) -> Result<(), CliError> {
    let s = ctx.file.resolve("benchmark", &a.settings)?;
    let model: ModelConfig = ctx.file.resolve("model", &a.model)?.build(Preset::Full);
    model.validate()?;
    ctx.log_config("benchmark", &serde_json::json!({ "model": model, "settings": s }));
    let two = count_attention_flops(&model, AttentionMode::TwoLevel);
    let flat = count_attention_flops(&model, AttentionMode::Flat);
    println!("packets {} len {} dim {}", model.packets, model.len, model.dim);
    println!("two_level_attention_macs_per_layer {two}");
    println!("flat_attention_macs_per_layer {flat}");
    println!("ratio {:.3}", attention_speedup(&model));
    if s.verify.unwrap_or(false) {
        let agree = [AttentionMode::TwoLevel, AttentionMode::Flat]
            .iter()
            .all(|&m| count_attention_macs_by_loop(&model, m) == count_attention_flops(&model, m));
        println!("loop_counter_agrees {agree}");
        if !agree {
            return Err(CliError::Failed("loop counter disagrees with the analytic count".into()));
        }
    }
    if s.measure.unwrap_or(false) {
        let batch = s.batch.unwrap_or(4).max(1);
        let repeats = s.repeats.unwrap_or(3);
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
        let params = ModelParams::<f32>::init(model, None, &mut rng)?;
        let spec = SyntheticSpec { class_count: 1, flows_per_class: batch, seed: ctx.seed, ..Default::default() };
        let data = generate_token_dataset(&spec, SelectionPolicy::FirstK(model.packets), model.len)?;
        let grids: Vec<TokenGrid> = data.records.iter().map(|r| r.grid.clone()).collect();
        let tokens = TokenBatch::from_grids(&grids)?;
        let t_two = best_of(repeats, || encode_flow(&params, &tokens).map(drop).map_err(Into::into))?;
        let t_flat = best_of(repeats, || encode_flat(&params, &tokens).map(drop).map_err(Into::into))?;
        println!("two_level_forward_ms {:.2}", t_two * 1e3);
        println!("flat_forward_ms {:.2}", t_flat * 1e3);
        println!("measured_ratio {:.3}", t_flat / t_two);
    }
    Ok(())
}
