//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use miett_core::baseline::{BagOfTokensClassifier, BaselineConfig};
use miett_core::finetune::{evaluate, Pooling};
use miett_core::ingest::{apply_labels, parse_pcap, segment_flows, SelectionPolicy};
use miett_core::model::{
    attention_speedup, count_attention_flops, count_attention_macs_by_loop, encode_flow, flow_attention_block, packet_attention_block,
    AttentionMode, ModelConfig, ProjectionHead,
};
use miett_core::pretrain::{
    apply_mfp_mask, fcl_loss, prpp_logits, prpp_loss, pretrain_objective, tied_softmax_cross_entropy, LossWeights, MaskPolicy, MaskingConfig,
    PretrainBatch,
};
use miett_core::synthetic::{generate_pcap, generate_token_dataset, SyntheticSpec};
use miett_core::tokenizer::{build_token_grid, tokenize_flows, is_content, CLS, PAD, VOCAB_SIZE};
use miett_core::trainer::{freeze, gradcheck, jitter, GradcheckConfig, StepMetrics, TrainConfig, Trainer, DEFAULT_PRETRAIN_FREEZE};
use miett_core::{FlowTensor, ModelParams, Parameters, TokenBatch, TokenDataset, TokenGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_grids(n: usize, packets: usize, len: usize, seed: u64) -> Vec<TokenGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let rows: Vec<Vec<u8>> = (0..rng.gen_range(2..=packets)).map(|_| (0..rng.gen_range(8..2 * len)).map(|_| rng.gen()).collect()).collect();
            build_token_grid(&rows, packets, len).unwrap()
        })
        .collect()
}

// 1: two-level vs flat attention cost
fn attention_cost() -> Outcome {
    let start = Instant::now();
    let full = ModelConfig { len: 128, packets: 5, ..ModelConfig::full() };
    let ratio = attention_speedup(&full);
    check((ratio - 4.812).abs() <= 0.01, format!("ratio {ratio:.4} not within 0.01 of 4.812"))?;
    let small = ModelConfig { len: 8, packets: 3, dim: 4, heads: 1, ..ModelConfig::desk() };
    for mode in [AttentionMode::TwoLevel, AttentionMode::Flat] {
        let (analytic, counted) = (count_attention_flops(&small, mode), count_attention_macs_by_loop(&small, mode));
        check(analytic == counted, format!("{mode:?}: analytic {analytic} vs loop {counted}"))?;
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(1), format!("took {elapsed:?}"))?;
    Ok(format!("flat/two-level ratio {ratio:.4} at L=128 N=5; loop counter agrees at L=8 N=3; {elapsed:.2?}"))
}

// 2: gradient audit of the combined pre-training loss
fn gradient_audit() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::desk();
    check((cfg.len, cfg.packets, cfg.dim, cfg.layers, cfg.heads) == (32, 5, 64, 2, 4), "desk config changed")?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base = ModelParams::<f32>::init(cfg, None, &mut rng).unwrap().cast::<f64>();
    let batch = PretrainBatch::prepare(&random_grids(2, cfg.packets, cfg.len, 3), &MaskingConfig::default(), &mut rng).unwrap();
    let gc = GradcheckConfig::default();
    let mut worst = Vec::new();
    for jitter_scale in [0.0, 0.1] {
        let mut p = base.clone();
        if jitter_scale > 0.0 {
            jitter(&mut p, jitter_scale, 5);
        }
        let report = gradcheck(&mut p, &BTreeSet::new(), &gc, |p, g| Ok(pretrain_objective(p, &batch, LossWeights::default(), g)?.total))
            .map_err(|e| e.to_string())?;
        let n = report.checked().count();
        check(n == p.named().len(), format!("only {n} parameters checked"))?;
        let w = report.entries.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
        check(report.max_rel_error < 1e-4, format!("{} max relative error {:.2e}", w.name, w.max_rel_error))?;
        worst.push(format!("{:.1e} ({})", report.max_rel_error, w.name));
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(300), format!("took {elapsed:?}"))?;
    Ok(format!("max relative error at init {}, jittered {}; {elapsed:.1?}", worst[0], worst[1]))
}

// 3: closed-form values of the three losses
fn loss_anchors() -> Outcome {
    let cfg = ModelConfig::desk();
    let zero = ModelParams::<f64>::zeros(cfg, None).unwrap();
    let grids = random_grids(2, cfg.packets, cfg.len, 4);
    let batch = PretrainBatch::prepare(&grids, &MaskingConfig::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let losses = pretrain_objective(&zero, &batch, LossWeights::default(), None).map_err(|e| e.to_string())?;
    let mfp_expected = (VOCAB_SIZE as f64).ln();
    check((losses.mfp - mfp_expected).abs() <= 1e-3, format!("uniform MFP {} vs {mfp_expected}", losses.mfp))?;
    let prpp_expected = 20.0 * std::f64::consts::LN_2;
    check((losses.prpp - prpp_expected).abs() <= 1e-4, format!("uninformative PRPP {} vs {prpp_expected}", losses.prpp))?;

    let (b, n, d) = (4, 5, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let same: Vec<f64> = (0..b * n).flat_map(|_| v.iter().copied()).collect();
    let fcl = fcl_loss(&same, b, n, d, None).map_err(|e| e.to_string())?.0.sum;
    let fcl_expected = (b * n * (n - 1)) as f64 * (b as f64).ln();
    check((fcl - fcl_expected).abs() <= 1e-3, format!("uniform FCL {fcl} vs {fcl_expected}"))?;
    check((fcl_expected - 110.904).abs() < 1e-3, "expected value drifted")?;
    // direct check of the tied head as well
    let table = miett_core::Tensor::<f64>::zeros(&[VOCAB_SIZE, 8]);
    let bias = miett_core::Tensor::<f64>::zeros(&[VOCAB_SIZE]);
    let (direct, _) = tied_softmax_cross_entropy(&table, &bias, &[0.5; 16], &[1, 65_535], None).map_err(|e| e.to_string())?;
    check((direct - mfp_expected).abs() <= 1e-3, "tied head not uniform")?;
    Ok(format!("MFP {:.6} (ln 65539 = {mfp_expected:.6}), PRPP {:.6}, FCL {fcl:.4}", losses.mfp, losses.prpp))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + 1e-8)
}

// 4: FCL against a triple loop, PRPP logits against scalar arithmetic
fn oracles() -> Outcome {
    let (b, n, d) = (3, 4, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let c: Vec<f64> = (0..b * n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let at = |i: usize, j: usize| &c[(i * n + j) * d..(i * n + j + 1) * d];
    let mut oracle = 0.0;
    for i1 in 0..b {
        for j1 in 0..n {
            for j2 in (0..n).filter(|&j2| j2 != j1) {
                let pos = cosine(at(i1, j1), at(i1, j2)).exp();
                let neg: f64 = (0..b).filter(|&i2| i2 != i1).map(|i2| cosine(at(i1, j1), at(i2, j2)).exp()).sum();
                oracle -= (pos / (pos + neg)).ln();
            }
        }
    }
    let fcl = fcl_loss(&c, b, n, d, None).map_err(|e| e.to_string())?.0.sum;
    check((fcl - oracle).abs() <= 1e-6, format!("FCL {fcl} vs triple loop {oracle}"))?;

    // d = 2, one flow of 3 packets
    let mut head = ProjectionHead::<f64>::zeros(2, 2);
    head.fc1.weight.data = vec![0.7, -0.3, 0.2, 0.9];
    head.fc1.bias.data = vec![0.1, -0.05];
    head.ln.gamma.data = vec![1.5, 0.5];
    head.ln.beta.data = vec![0.2, -0.1];
    head.fc2.weight.data = vec![0.4, -1.1, 0.8, 0.3];
    head.fc2.bias.data = vec![0.05, -0.02];
    let cls = [0.3, -1.2, 1.0, 0.4, -0.6, 0.9];
    let eps = 1e-12;
    let (logits, _) = prpp_logits(&cls, 1, 3, &head, eps).map_err(|e| e.to_string())?;
    let gelu = |x: f64| 0.5 * x * (1.0 + libm_erf(x / std::f64::consts::SQRT_2));
    let project = |x0: f64, x1: f64| -> (f64, f64) {
        let h0 = gelu(x0 * 0.7 + x1 * 0.2 + 0.1);
        let h1 = gelu(x0 * -0.3 + x1 * 0.9 - 0.05);
        let mean = (h0 + h1) / 2.0;
        let var = ((h0 - mean).powi(2) + (h1 - mean).powi(2)) / 2.0;
        let s = (var + eps).sqrt();
        ((h0 - mean) / s * 1.5 + 0.2, (h1 - mean) / s * 0.5 - 0.1)
    };
    let p: Vec<(f64, f64)> = (0..3).map(|i| project(cls[2 * i], cls[2 * i + 1])).collect();
    let mut max_err = 0.0f64;
    for i in 0..3 {
        for j in (0..3).filter(|&j| j != i) {
            let (u0, u1) = (p[i].0 - p[j].0, p[i].1 - p[j].1);
            let expect = [u0 * 0.4 + u1 * 0.8 + 0.05, u0 * -1.1 + u1 * 0.3 - 0.02];
            for k in 0..2 {
                max_err = max_err.max((logits[(i * 3 + j) * 2 + k] - expect[k]).abs());
            }
        }
    }
    check(max_err <= 1e-6, format!("PRPP logits differ by {max_err:e}"))?;
    let (loss, _) = prpp_loss(&logits, &[vec![2, 0, 1]], 3, 1.0).map_err(|e| e.to_string())?;
    Ok(format!("FCL {fcl:.9} vs loop {oracle:.9}; PRPP logits max error {max_err:.1e}, loss {loss:.4}"))
}

/// erf by its Maclaurin series, adequate for |x| < 3 in double precision.
fn libm_erf(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for k in 1..200 {
        term *= -x * x / k as f64;
        let add = term / (2 * k + 1) as f64;
        sum += add;
        if add.abs() < 1e-18 {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

// 5: where information can and cannot flow
fn attention_structure() -> Outcome {
    let cfg = ModelConfig { len: 8, packets: 4, dim: 16, layers: 2, heads: 2, mlp_hidden: 32, ..ModelConfig::desk() };
    let params = ModelParams::<f64>::init(cfg, None, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data: Vec<f64> = (0..2 * cfg.packets * cfg.len * cfg.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = FlowTensor::new(2, cfg.packets, cfg.len, cfg.dim, data).unwrap();
    let mut bumped = x.clone();
    let (bp, bj) = (1, 3);
    let off = ((cfg.packets + bp) * cfg.len + bj) * cfg.dim;
    bumped.data[off] += 0.5;

    let ya = packet_attention_block(&params, 0, &x, None).unwrap();
    let yb = packet_attention_block(&params, 0, &bumped, None).unwrap();
    for b in 0..2 {
        for i in 0..cfg.packets {
            for j in 0..cfg.len {
                let same = ya.at(b, i, j) == yb.at(b, i, j);
                check(same != (b == 1 && i == bp), format!("packet attention leak at ({b},{i},{j})"))?;
            }
        }
    }
    let ya = flow_attention_block(&params, 0, &x).unwrap();
    let yb = flow_attention_block(&params, 0, &bumped).unwrap();
    for b in 0..2 {
        for i in 0..cfg.packets {
            for j in 0..cfg.len {
                let same = ya.at(b, i, j) == yb.at(b, i, j);
                check(same != (b == 1 && j == bj), format!("flow attention leak at ({b},{i},{j})"))?;
            }
        }
    }

    let grids = random_grids(3, cfg.packets, cfg.len, 9);
    let perm = [2usize, 0, 3, 1];
    let permuted: Vec<TokenGrid> = grids.iter().map(|g| g.permute_rows(&perm)).collect();
    let p32 = params.cast::<f32>();
    let out = encode_flow(&p32, &TokenBatch::from_grids(&grids).unwrap()).unwrap();
    let out_p = encode_flow(&p32, &TokenBatch::from_grids(&permuted).unwrap()).unwrap();
    let mut max_diff = 0.0f32;
    for b in 0..grids.len() {
        for (r, &src) in perm.iter().enumerate() {
            for j in 0..cfg.len {
                for (u, v) in out_p.at(b, r, j).iter().zip(out.at(b, src, j)) {
                    max_diff = max_diff.max((u - v).abs());
                }
            }
        }
    }
    check(max_diff <= 1e-5, format!("permutation equivariance off by {max_diff:e}"))?;
    Ok(format!("no cross-packet flow in packet attention, no cross-position flow in flow attention; permutation error {max_diff:.1e}"))
}

// 6: masking rate and special-token safety
fn masking_statistics() -> Outcome {
    let (flows, packets, len) = (10_000usize, 6usize, 101usize);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut total = 0usize;
    for f in 0..flows {
        // five rows of 101 bytes give 500 bigrams; the sixth row is padding
        let rows: Vec<Vec<u8>> = (0..5).map(|_| (0..101).map(|_| rng.gen()).collect()).collect();
        let grid = build_token_grid(&rows, packets, len).unwrap();
        let (masked, plan) = apply_mfp_mask(&grid, 0.15, MaskPolicy::AlwaysMask, &mut rng).unwrap();
        check(plan.content_tokens == 500, "grid does not hold 500 content tokens")?;
        for (k, (&orig, &now)) in grid.ids().iter().zip(masked.ids()).enumerate() {
            if orig == CLS || orig == PAD {
                check(now == orig, format!("flow {f}: special token at {k} was changed"))?;
            }
        }
        for &(i, j) in &plan.masked {
            check(is_content(grid.get(i, j)), format!("flow {f}: masked a non-content token"))?;
        }
        total += plan.len();
    }
    let mean = total as f64 / flows as f64;
    let sigma = (500.0 * 0.15 * 0.85 / flows as f64).sqrt();
    check((mean - 75.0).abs() <= 3.0 * sigma, format!("mean masked count {mean:.3} outside 75 +- {:.3}", 3.0 * sigma))?;
    Ok(format!("mean masked {mean:.3} per 500 tokens (75 +- {:.3}); no special token ever masked", 3.0 * sigma))
}

/// Rebuilds packet bytes from overlapping bigrams, checking the overlap.
fn decode_row(ids: &[u32]) -> Option<Vec<u8>> {
    let content: Vec<u32> = ids[1..].iter().copied().take_while(|&t| t != PAD).collect();
    let mut bytes = vec![(*content.first()? >> 8) as u8];
    for w in content.windows(2) {
        if (w[0] & 0xff) != (w[1] >> 8) {
            return None;
        }
    }
    bytes.extend(content.iter().map(|&t| (t & 0xff) as u8));
    Some(bytes)
}

// 7: capture -> flows -> tokens
fn pipeline_round_trip() -> Outcome {
    let spec = SyntheticSpec { class_count: 4, flows_per_class: 25, seed: 11, ..Default::default() };
    let (pcap, labels) = generate_pcap(&spec).unwrap();
    let seg = segment_flows(&parse_pcap(&pcap).map_err(|e| e.to_string())?);
    check(seg.flows.len() == spec.total_flows(), format!("{} flows recovered, {} generated", seg.flows.len(), spec.total_flows()))?;
    let mut flows = seg.flows;
    let missing = apply_labels(&mut flows, &labels);
    check(missing == 0, format!("{missing} flows without a label"))?;
    let len = 64;
    let data = tokenize_flows(&flows, SelectionPolicy::FirstK(5), len).map_err(|e| e.to_string())?;
    let generated = miett_core::synthetic::generate_flows(&spec).unwrap();
    let mut by_key = std::collections::BTreeMap::new();
    for g in &generated {
        by_key.insert(g.key(), g);
    }
    let mut rows_checked = 0;
    for (flow, rec) in flows.iter().zip(&data.records) {
        let src = by_key[&flow.key];
        check(rec.label == Some(src.label), "label mismatch")?;
        for (i, packet) in src.packets.iter().take(5).enumerate() {
            let decoded = decode_row(rec.grid.row(i)).ok_or("bigram overlap broken")?;
            let mut expected = miett_core::ingest::anonymize(&packet.ip).unwrap();
            expected.truncate(len);
            check(decoded == expected, format!("flow {} packet {i}: payload prefix differs", flow.key))?;
            rows_checked += 1;
        }
    }
    let direct = generate_token_dataset(&spec, SelectionPolicy::FirstK(5), len).unwrap();
    let mut a: Vec<_> = data.records.iter().map(|r| (r.label, r.grid.ids().to_vec())).collect();
    let mut b: Vec<_> = direct.records.iter().map(|r| (r.label, r.grid.ids().to_vec())).collect();
    a.sort();
    b.sort();
    check(a == b, "capture path and direct token path disagree")?;
    Ok(format!("{} flows, labels intact, {rows_checked} packet prefixes decoded exactly", flows.len()))
}

const LEARN_LEN: usize = 64;
const FINETUNE_STEPS: u64 = 200;
const FINETUNE_BATCH: usize = 16;
const PRETRAIN_STEPS: u64 = 60;
const PRETRAIN_BATCH: usize = 8;
const DESK_LR: f64 = 1e-3;
const PRETRAIN_LR: f64 = 1e-4;

fn learning_config() -> ModelConfig {
    ModelConfig { len: LEARN_LEN, ..ModelConfig::desk() }
}

fn finetune_accuracy(params: ModelParams<f32>, train: &TokenDataset, test: &TokenDataset, seed: u64) -> f64 {
    let mut cfg = TrainConfig::finetune();
    cfg.batch_size = FINETUNE_BATCH;
    cfg.optimizer.learning_rate = DESK_LR;
    cfg.seed = seed;
    let mut t = Trainer::new(cfg, params).unwrap();
    t.run(train, FINETUNE_STEPS, |_| {}).unwrap();
    evaluate(&t.params, test, 64, Pooling::AllRows).unwrap().accuracy
}

fn pretrained(params: ModelParams<f32>, data: &TokenDataset, seed: u64) -> ModelParams<f32> {
    let mut cfg = TrainConfig::pretrain();
    cfg.batch_size = PRETRAIN_BATCH;
    cfg.optimizer.learning_rate = PRETRAIN_LR;
    cfg.seed = seed;
    let mut t = Trainer::new(cfg, params).unwrap();
    t.run(data, PRETRAIN_STEPS, |_| {}).unwrap();
    t.params
}

// 8: the model learns the synthetic task, and pre-training does not hurt
fn learning() -> Outcome {
    let spec = SyntheticSpec::default();
    let data = generate_token_dataset(&spec, SelectionPolicy::FirstK(5), LEARN_LEN).unwrap();
    let (train, test) = data.split(0.25, 0);
    let gate = BagOfTokensClassifier::fit(&train, &BaselineConfig::default()).unwrap().evaluate(&test).unwrap().accuracy;
    check(gate >= 0.95, format!("bag-of-tokens baseline only {gate:.3}; task not learnable"))?;

    let start = Instant::now();
    let init = ModelParams::<f32>::init(learning_config(), Some(spec.class_count), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let scratch = finetune_accuracy(init, &train, &test, 0);
    let elapsed = start.elapsed();
    check(scratch >= 0.95, format!("fine-tuned accuracy {scratch:.3} < 0.95"))?;
    check(elapsed < Duration::from_secs(600), format!("fine-tuning took {elapsed:?}"))?;

    let mut wins = 0;
    let mut pairs = Vec::new();
    for trial in 1..=5u64 {
        let spec = SyntheticSpec { seed: trial, ..Default::default() };
        let data = generate_token_dataset(&spec, SelectionPolicy::FirstK(5), LEARN_LEN).unwrap();
        let (train, test) = data.split(0.25, trial);
        let init = ModelParams::<f32>::init(learning_config(), Some(spec.class_count), &mut ChaCha8Rng::seed_from_u64(trial)).unwrap();
        let scratch = finetune_accuracy(init.clone(), &train, &test, trial);
        let pre = finetune_accuracy(pretrained(init, &train, trial), &train, &test, trial);
        wins += usize::from(pre >= scratch);
        pairs.push(format!("{pre:.2}/{scratch:.2}"));
    }
    check(wins >= 4, format!("pretrained >= scratch in only {wins}/5 trials (pre/scratch: {})", pairs.join(" ")))?;
    Ok(format!(
        "baseline {gate:.3}; scratch fine-tune {scratch:.3} in {elapsed:.0?}; pretrained >= scratch in {wins}/5 (pre/scratch: {})",
        pairs.join(" ")
    ))
}

// 9: reproducibility and frozen packet attention
fn determinism_and_freezing() -> Outcome {
    let cfg = ModelConfig::desk();
    let data = generate_token_dataset(&SyntheticSpec { flows_per_class: 8, ..Default::default() }, SelectionPolicy::FirstK(5), cfg.len).unwrap();
    let trace = || -> Vec<StepMetrics> {
        let init = ModelParams::<f32>::init(cfg, Some(4), &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        let mut pc = TrainConfig::pretrain();
        pc.batch_size = 4;
        pc.seed = 13;
        let mut t = Trainer::new(pc, init).unwrap();
        let mut out = t.run(&data, 5, |_| {}).unwrap();
        let mut fc = TrainConfig::finetune();
        fc.batch_size = 4;
        fc.seed = 14;
        let mut t = Trainer::new(fc, t.params).unwrap();
        out.extend(t.run(&data, 5, |_| {}).unwrap());
        out
    };
    let (a, b) = (trace(), trace());
    check(a == b, "loss traces differ between identical runs")?;

    let init = ModelParams::<f32>::init(cfg, None, &mut ChaCha8Rng::seed_from_u64(15)).unwrap();
    let frozen = freeze(&init, &[DEFAULT_PRETRAIN_FREEZE.to_string()]).unwrap().frozen;
    let mut pc = TrainConfig::pretrain();
    pc.batch_size = 2;
    pc.optimizer.learning_rate = 1e-3;
    let mut t = Trainer::new(pc, init.clone()).unwrap();
    t.run(&data, 100, |_| {}).unwrap();
    let before = init.named();
    let after = t.params.named();
    let mut frozen_seen = 0;
    let mut moved = 0;
    for ((name, x), (_, y)) in before.iter().zip(&after) {
        let same = x.data.iter().zip(&y.data).all(|(u, v)| u.to_bits() == v.to_bits());
        if frozen.contains(name) {
            check(same, format!("{name} changed while frozen"))?;
            check(name.contains(".packet_"), format!("{name} frozen unexpectedly"))?;
            frozen_seen += 1;
        } else if !same {
            moved += 1;
        }
    }
    check(frozen_seen > 0 && moved > 0, "freeze test is vacuous")?;
    Ok(format!("{} identical steps across two runs; {frozen_seen} packet-attention tensors bit-identical after 100 steps, {moved} others updated", a.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("attention cost ratio", attention_cost),
        ("gradient audit", gradient_audit),
        ("closed-form losses", loss_anchors),
        ("oracle equivalence", oracles),
        ("attention structure", attention_structure),
        ("masking statistics", masking_statistics),
        ("pipeline round trip", pipeline_round_trip),
        ("desk-scale learning", learning),
        ("determinism and freezing", determinism_and_freezing),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {n} PASS [{name}] {detail} ({:.1?})", start.elapsed()),
            Err(why) => {
                failed += 1;
                println!("criterion {n} FAIL [{name}] {why} ({:.1?})", start.elapsed());
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
