use miett_core::checkpoint::{Checkpoint, TrainingState};
use miett_core::ingest::SelectionPolicy;
use miett_core::synthetic::{generate_token_dataset, SyntheticSpec};
use miett_core::trainer::{Stage, StepMetrics, TrainConfig, Trainer};
use miett_core::{ModelConfig, ModelParams, TokenDataset};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig { len: 16, dim: 16, heads: 2, mlp_hidden: 32, layers: 1, ..ModelConfig::desk() }
}

fn data(cfg: &ModelConfig) -> TokenDataset {
    let spec = SyntheticSpec { class_count: 3, flows_per_class: 6, seed: 4, ..Default::default() };
    generate_token_dataset(&spec, SelectionPolicy::FirstK(cfg.packets), cfg.len).unwrap()
}

fn trainer(stage: Stage) -> Trainer {
    let cfg = small();
    let classes = (stage == Stage::Finetune).then_some(3);
    let params = ModelParams::init(cfg, classes, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut tc = match stage {
        Stage::Pretrain => TrainConfig::pretrain(),
        Stage::Finetune => TrainConfig::finetune(),
    };
    tc.batch_size = 4;
    tc.seed = 2;
    tc.optimizer.learning_rate = 1e-3;
    Trainer::new(tc, params).unwrap()
}

fn snapshot(t: &Trainer) -> Vec<u8> {
    Checkpoint {
        params: t.params.clone(),
        training: Some(TrainingState { config: t.config.clone(), optimizer: t.state.clone(), rng: t.rng_state() }),
    }
    .to_bytes()
    .unwrap()
}

#[test]
fn resuming_from_a_checkpoint_matches_a_continuous_run() {
    let ds = data(&small());
    for stage in [Stage::Pretrain, Stage::Finetune] {
        let mut continuous = trainer(stage);
        let full: Vec<StepMetrics> = continuous.run(&ds, 10, |_| {}).unwrap();

        let mut first = trainer(stage);
        let mut split = first.run(&ds, 4, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        Checkpoint::from_bytes(&snapshot(&first)).unwrap().save(&path).unwrap();
        let restored = Checkpoint::load(&path).unwrap();
        let state = restored.training.unwrap();
        let mut second = Trainer::resume(state.config, restored.params, state.optimizer, state.rng).unwrap();
        split.extend(second.run(&ds, 6, |_| {}).unwrap());

        assert_eq!(split, full, "{stage} trace");
        assert_eq!(snapshot(&second), snapshot(&continuous), "{stage} final state");
    }
}

#[test]
fn pretraining_lowers_the_combined_loss() {
    let cfg = ModelConfig { len: 32, ..small() };
    let ds = data(&cfg);
    let params = ModelParams::init(cfg, None, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut tc = TrainConfig::pretrain();
    tc.batch_size = 4;
    tc.seed = 3;
    tc.optimizer.learning_rate = 1e-3;
    let mut t = Trainer::new(tc, params).unwrap();
    let trace = t.run(&ds, 200, |_| {}).unwrap();
    let mean = |s: &[StepMetrics]| s.iter().map(|m| m.total).sum::<f64>() / s.len() as f64;
    assert!(trace[199].total < trace[0].total, "{} -> {}", trace[0].total, trace[199].total);
    assert!(mean(&trace[190..]) < mean(&trace[..10]));
    let mfp = |m: &StepMetrics| m.mfp.unwrap();
    assert!(mfp(&trace[199]) < mfp(&trace[0]));
}
