//! Integration tests for the training loop, distillation cache replay, and
//! the twin-run equality between supervised training and distillation at
//! lambda = 1.

use std::path::PathBuf;

use repmobile::audio::{Frontend, FrontendConfig, SAMPLE_RATE};
use repmobile::data::{gen_split, LoadedDataset, Split, SyntheticSceneSpec};
use repmobile::distill::{
    cache_teachers, distill_train, DistillConfig, LogitsCache, ModelTeacher, TeacherHandle,
};
use repmobile::model::{build_model, BranchShape, ModelGraph};
use repmobile::tensor::Tensor;
use repmobile::train::{evaluate, fit, LossSpec, TrainConfig};

fn tiny_dataset(n_per_class: usize, seed: u64, dir: &std::path::Path) -> LoadedDataset {
    let spec = SyntheticSceneSpec {
        seed,
        ..SyntheticSceneSpec::default()
    };
    let index = gen_split(&spec, n_per_class, Split::Train, dir).unwrap();
    LoadedDataset::load(index).unwrap()
}

fn tiny_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        warmup_epochs: 1.0,
        peak_lr: 0.01,
        seed,
        eval_every: 0,
        ..TrainConfig::default()
    }
}

fn weights_of(m: &ModelGraph<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::new();
    m.for_each_tensor(&mut |n, t| out.push((n.to_string(), t.clone())));
    out
}

#[test]
fn supervised_smoke_and_bitwise_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(2, 5, dir.path());
    let cfg = tiny_cfg(2, 11);
    let run = || {
        let model = build_model::<f32>(8, &BranchShape::ALL, 3).unwrap();
        fit(model, &data, None, None, &cfg, &LossSpec::CrossEntropy).unwrap()
    };
    let a = run();
    assert_eq!(a.metrics.len(), 2);
    assert!(a.metrics.iter().all(|m| m.train_loss.is_finite()));
    let b = run();
    assert_eq!(weights_of(&a.model), weights_of(&b.model), "rerun must be bitwise identical");
    let csv_a = repmobile::train::metrics_csv(&a.metrics);
    let csv_b = repmobile::train::metrics_csv(&b.metrics);
    assert_eq!(csv_a, csv_b);
}

#[test]
fn cache_counts_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(2, 6, dir.path()); // 20 samples
    let teacher_model = build_model::<f32>(8, &[BranchShape::K3x3], 9).unwrap();
    let teacher = ModelTeacher::new("t0", teacher_model);
    let handles: Vec<&dyn TeacherHandle> = vec![&teacher];
    let cfg = tiny_cfg(1, 21);

    // K=1, 2 samples, 1 epoch -> exactly 2 records
    let two = [0u64, 1];
    let cache = cache_teachers(&handles, &data, Some(&two), 1, &cfg).unwrap();
    assert_eq!(cache.len(), 2);

    // a fuller cache replays within 1e-5 (bitwise, in fact)
    let cache = cache_teachers(&handles, &data, None, 2, &cfg).unwrap();
    assert_eq!(cache.len(), 40);
    let file = dir.path().join("logits.rlgc");
    cache.write(&file).unwrap();
    assert_eq!(std::fs::metadata(&file).unwrap().len(), cache.expected_file_size());

    let back = LogitsCache::read(&file).unwrap();
    let frontend = Frontend::new(FrontendConfig::default(), SAMPLE_RATE);
    let worst = repmobile::distill::replay_cache(&back, &handles, &data, &frontend).unwrap();
    assert!(worst <= 1e-5, "replay deviation {}", worst);
}

#[test]
fn non_finite_teacher_aborts_cache() {
    struct BadTeacher;
    impl TeacherHandle for BadTeacher {
        fn id(&self) -> &str {
            "bad"
        }
        fn param_count(&self) -> u64 {
            0
        }
        fn score(&self, batch: &Tensor<f32>) -> repmobile::Result<Tensor<f32>> {
            Ok(Tensor::full(&[batch.shape()[0], 10], f32::NAN))
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(1, 7, dir.path());
    let handles: Vec<&dyn TeacherHandle> = vec![&BadTeacher];
    let err = cache_teachers(&handles, &data, None, 1, &tiny_cfg(1, 2)).unwrap_err();
    assert!(matches!(err, repmobile::Error::NonFinite(_)), "{:?}", err);
}

#[test]
fn distill_lambda_one_equals_supervised_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(2, 8, dir.path());
    let cfg = tiny_cfg(2, 31);

    let teacher = ModelTeacher::new("t0", build_model::<f32>(8, &[BranchShape::K3x3], 1).unwrap());
    let handles: Vec<&dyn TeacherHandle> = vec![&teacher];
    let cache = cache_teachers(&handles, &data, None, cfg.epochs, &cfg).unwrap();

    let student = || build_model::<f32>(8, &BranchShape::ALL, 77).unwrap();
    let supervised = fit(student(), &data, None, None, &cfg, &LossSpec::CrossEntropy).unwrap();
    let distilled = distill_train(
        student(),
        &cache,
        &data,
        None,
        None,
        &cfg,
        &DistillConfig {
            lambda: 1.0,
            tau: 0.1,
        },
    )
    .unwrap();
    assert_eq!(
        weights_of(&supervised.model),
        weights_of(&distilled.model),
        "lambda = 1 distillation must equal supervised training bitwise"
    );
}

#[test]
fn distill_cache_miss_aborts_with_sample_and_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(1, 9, dir.path());
    let cfg = tiny_cfg(2, 41); // two epochs wanted
    let teacher = ModelTeacher::new("t0", build_model::<f32>(8, &[BranchShape::K3x3], 2).unwrap());
    let handles: Vec<&dyn TeacherHandle> = vec![&teacher];
    let cache = cache_teachers(&handles, &data, None, 1, &cfg).unwrap(); // only one cached

    let err = distill_train(
        build_model::<f32>(8, &BranchShape::ALL, 3).unwrap(),
        &cache,
        &data,
        None,
        None,
        &cfg,
        &DistillConfig::default(),
    )
    .unwrap_err();
    assert!(
        matches!(err, repmobile::Error::CacheMiss { epoch: 1, .. }),
        "{:?}",
        err
    );
}

#[test]
fn distill_loss_decreases_on_synthetic_task() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(4, 10, dir.path()); // 40 samples
    let mut cfg = tiny_cfg(20, 51);
    cfg.warmup_epochs = 2.0;

    let teacher = ModelTeacher::new("t0", build_model::<f32>(8, &[BranchShape::K3x3], 5).unwrap());
    let handles: Vec<&dyn TeacherHandle> = vec![&teacher];
    let cache = cache_teachers(&handles, &data, None, cfg.epochs, &cfg).unwrap();

    let outcome = distill_train(
        build_model::<f32>(8, &BranchShape::ALL, 6).unwrap(),
        &cache,
        &data,
        None,
        None,
        &cfg,
        &DistillConfig::default(),
    )
    .unwrap();
    let first = outcome.metrics.first().unwrap().train_loss;
    let last = outcome.metrics.last().unwrap().train_loss;
    assert!(
        last < first,
        "loss should decrease over 20 epochs: {} -> {}",
        first,
        last
    );
}

#[test]
fn training_beats_chance_after_a_few_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let train_dir = dir.path().join("train");
    let test_dir = dir.path().join("test");
    let spec = SyntheticSceneSpec {
        seed: 12,
        ..SyntheticSceneSpec::default()
    };
    let train = LoadedDataset::load(gen_split(&spec, 10, Split::Train, &train_dir).unwrap()).unwrap();
    let test = LoadedDataset::load(gen_split(&spec, 3, Split::Test, &test_dir).unwrap()).unwrap();

    let mut cfg = tiny_cfg(10, 61);
    cfg.batch_size = 16;
    cfg.warmup_epochs = 2.0;
    let outcome = fit(
        build_model::<f32>(8, &BranchShape::ALL, 13).unwrap(),
        &train,
        None,
        Some(&test),
        &cfg,
        &LossSpec::CrossEntropy,
    )
    .unwrap();
    let frontend = Frontend::new(FrontendConfig::default(), SAMPLE_RATE);
    let acc = evaluate(&outcome.model, &test, &frontend, 16).unwrap().accuracy;
    assert!(acc > 0.2, "accuracy {} should beat chance after 10 epochs", acc);

    // smoke: metrics rows equal epoch count, final eval recorded
    assert_eq!(outcome.metrics.len(), 10);
    assert!(outcome.metrics.last().unwrap().eval_acc.is_some());
    assert!(outcome.best_model.is_some());
    let _ = PathBuf::new();
}
