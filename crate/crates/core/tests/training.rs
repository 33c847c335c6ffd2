use std::sync::Arc;

use vista3d::corpus::Task;
use vista3d::data::{Dataset, Example, InMemoryCorpus};
use vista3d::model::{checkpoint_bytes, load_checkpoint, Model, ModelConfig};
use vista3d::tensor::DType;
use vista3d::trainer::{
    finetune, fraction_subset, load_train_state, pretrain, FinetuneConfig, PretrainConfig, RunDir, Schedule,
};
use vista3d::verify::tiny_corpus;

fn corpus() -> InMemoryCorpus {
    tiny_corpus(3, 24).unwrap()
}

fn model(c: &InMemoryCorpus) -> Model<f32> {
    let cfg = ModelConfig {
        dtype: DType::F32,
        ..ModelConfig::tiny(0, 0)
    };
    Model::new(cfg, c.vocab.clone(), c.classes.clone(), 5).unwrap()
}

/// `n` examples cycling through `data`.
fn repeated(data: &Dataset, n: usize) -> Dataset {
    let examples: Vec<Example> = data.examples.iter().cycle().take(n).cloned().collect();
    Dataset {
        task: data.task,
        examples,
    }
}

fn pre_cfg(epochs: usize) -> PretrainConfig {
    PretrainConfig {
        epochs,
        batch_size: 4,
        lr: 1e-3,
        warmup_steps: 3,
        ..Default::default()
    }
}

#[test]
fn thousand_samples_at_batch_fifty_is_twenty_steps() {
    let c = corpus();
    let data = repeated(&c.train[&Task::Grounding], 1000);
    let mut m = model(&c);
    let cfg = FinetuneConfig {
        epochs: 1,
        batch_size: 50,
        warmup_steps: 5,
        ..Default::default()
    };
    let out = finetune(&mut m, &data, None, &cfg, None).unwrap();
    assert_eq!(out.steps, 20);
    let quarter = FinetuneConfig { fraction: 0.25, ..cfg };
    let out = finetune(&mut model(&c), &data, None, &quarter, None).unwrap();
    assert_eq!(out.steps, 5);
}

#[test]
fn warmup_longer_than_training_is_shrunk() {
    let s = Schedule::fitted(200, 50, 1e-4).unwrap();
    assert!(s.warmup < 50);
    assert_eq!(s.lr_at(0), 0.0);
    assert!((s.lr_at(s.warmup) - 1e-4).abs() < 1e-18);
    assert_eq!(s.lr_at(50), 0.0);
}

#[test]
fn fraction_subset_is_seeded_and_stable() {
    let a = fraction_subset(1000, 0.25, 7);
    assert_eq!(a.len(), 250);
    assert_eq!(a, fraction_subset(1000, 0.25, 7));
    assert_ne!(a, fraction_subset(1000, 0.25, 8));
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(fraction_subset(10, 0.01, 0).len(), 1);
    assert_eq!(fraction_subset(10, 1.0, 0), (0..10).collect::<Vec<_>>());
}

#[test]
fn resume_matches_uninterrupted_run_bitwise() {
    let c = corpus();
    let data = &c.train[&Task::Pretrain];
    let dir = tempfile::tempdir().unwrap();

    let mut straight = model(&c);
    pretrain(&mut straight, data, None, &pre_cfg(3), None, None).unwrap();

    let run = RunDir::create(dir.path().join("run")).unwrap();
    let mut first = model(&c);
    pretrain(&mut first, data, None, &PretrainConfig {
            stop_after: Some(1),
            ..pre_cfg(3)
        }, Some(&run), None).unwrap();
    let mut resumed = load_checkpoint(&run.checkpoint()).unwrap();
    let state = load_train_state(&run.train_state()).unwrap();
    assert_eq!(state.epochs_done, 1);
    let out = pretrain(&mut resumed, data, None, &pre_cfg(3), Some(&run), Some(state)).unwrap();
    assert_eq!(out.records.len(), 2);
    assert_eq!(checkpoint_bytes(&resumed), checkpoint_bytes(&straight));
    let lines = std::fs::read_to_string(run.metrics()).unwrap();
    assert_eq!(lines.lines().count(), 3);
}

#[test]
fn overlapping_splits_are_refused() {
    let c = corpus();
    let train = &c.train[&Task::Grounding];
    let mut m = model(&c);
    let err = finetune(&mut m, train, Some(train), &FinetuneConfig::default(), None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn pretraining_rejects_task_samples() {
    let c = corpus();
    let mut m = model(&c);
    let err = pretrain(&mut m, &c.train[&Task::Qa], None, &pre_cfg(1), None, None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let empty = Dataset {
        task: Task::Pretrain,
        examples: Vec::new(),
    };
    assert!(pretrain(&mut m, &empty, None, &pre_cfg(1), None, None).is_err());
}

#[test]
fn examples_share_prepared_scenes() {
    let c = corpus();
    let ex = &c.train[&Task::Grounding].examples;
    let shared = ex
        .windows(2)
        .filter(|w| w[0].scene_id() == w[1].scene_id())
        .all(|w| Arc::ptr_eq(&w[0].scene, &w[1].scene));
    assert!(shared);
}
