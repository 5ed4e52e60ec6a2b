use criterion::{criterion_group, criterion_main, Criterion};
use miett_bench::{config, grids, params};
use miett_core::finetune::{finetune_objective, Pooling};
use miett_core::ingest::{apply_labels, parse_pcap, segment_flows, SelectionPolicy};
use miett_core::pretrain::{pretrain_objective, LossWeights, MaskingConfig, PretrainBatch};
use miett_core::synthetic::{generate_pcap, SyntheticSpec};
use miett_core::tokenizer::tokenize_flows;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ingest(c: &mut Criterion) {
    let (pcap, labels) = generate_pcap(&SyntheticSpec::default()).unwrap();
    c.bench_function("pcap_to_tokens", |b| {
        b.iter(|| {
            let mut flows = segment_flows(&parse_pcap(&pcap).unwrap()).flows;
            apply_labels(&mut flows, &labels);
            tokenize_flows(&flows, SelectionPolicy::FirstK(5), 128).unwrap()
        })
    });
}

fn training_steps(c: &mut Criterion) {
    let cfg = config(5, 64);
    let mut group = c.benchmark_group("objective_with_gradients");
    group.sample_size(10);

    let p = params(cfg, None);
    let mut g = p.zeros_like();
    let (flows, _) = grids(&cfg, 8);
    let prepared = PretrainBatch::prepare(&flows, &MaskingConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    group.bench_function("pretrain_b8", |b| {
        b.iter(|| pretrain_objective(&p, &prepared, LossWeights::default(), Some(&mut g)).unwrap())
    });

    let p = params(cfg, Some(4));
    let mut g = p.zeros_like();
    let (flows, labels) = grids(&cfg, 16);
    group.bench_function("finetune_b16", |b| {
        b.iter(|| finetune_objective(&p, &flows, &labels, Pooling::AllRows, Some(&mut g)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, ingest, training_steps);
criterion_main!(benches);
