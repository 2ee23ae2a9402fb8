//! Behavior of the full training pipeline on synthetic mapping tasks.

use rrnet_core::build::{BuildConfig, DistanceMetric};
use rrnet_core::net::{ModelConfig, ModelParams};
use rrnet_core::tensor::Reduction;
use rrnet_core::train::{
    gen_synthetic_task, prepare_mapping_task, split_dataset, train, TrainConfig,
};

fn build_cfg(seed: u64) -> BuildConfig {
    BuildConfig {
        k_intra1: 3,
        k_intra2: 3,
        k_inter: 3,
        metric: DistanceMetric::Cosine,
        seed,
    }
}

fn model_cfg(d1: usize, d2: usize) -> ModelConfig {
    ModelConfig {
        hidden: 8,
        n_intra_units: 1,
        n_inter_units: 1,
        encoder_hidden_layers: 1,
        raw_dim1: d1,
        raw_dim2: d2,
    }
}

fn train_cfg(lr: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        momentum: 0.9,
        weight_decay: 5e-4,
        epochs,
        seed: 7,
        eval_every: 20,
        loss_reduction: Reduction::Mean,
    }
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let mut task = gen_synthetic_task(20, 4, 6, 5, 0.1, 3).unwrap();
    split_dataset(&mut task.dataset, (0.8, 0.1, 0.1), 4).unwrap();
    let (bundle, tt) = prepare_mapping_task(&task.dataset, &build_cfg(5)).unwrap();
    let cfg = model_cfg(6, 5);
    let params = ModelParams::init(&cfg, 6).unwrap();
    let before = params.snapshot();
    let report = train(&bundle, &params, &cfg, &train_cfg(0.0, 5), &tt).unwrap();
    let after = params.snapshot();
    for (b, a) in before.iter().zip(&after) {
        assert_eq!(b, a);
    }
    // Loss history is flat when nothing moves.
    let first = report.epoch_loss[0];
    assert!(report.epoch_loss.iter().all(|&l| (l - first).abs() < 1e-15));
}

#[test]
fn three_cluster_task_loss_drops_hard() {
    let mut task = gen_synthetic_task(30, 3, 8, 6, 0.1, 11).unwrap();
    split_dataset(&mut task.dataset, (0.8, 0.1, 0.1), 12).unwrap();
    let (bundle, tt) = prepare_mapping_task(&task.dataset, &build_cfg(13)).unwrap();
    let cfg = ModelConfig { hidden: 16, ..model_cfg(8, 6) };
    let params = ModelParams::init(&cfg, 14).unwrap();
    let report = train(&bundle, &params, &cfg, &train_cfg(0.1, 200), &tt).unwrap();
    let initial = report.epoch_loss[0];
    let last = *report.epoch_loss.last().unwrap();
    assert!(
        last < 0.2 * initial,
        "loss {initial} -> {last}, wanted a 5x reduction"
    );
}

#[test]
fn noiseless_task_converges_fast() {
    // Every instance its own cluster, zero noise: training loss collapses
    // well below 5% of its starting value within 300 epochs.
    let mut task = gen_synthetic_task(12, 12, 6, 6, 0.0, 21).unwrap();
    split_dataset(&mut task.dataset, (1.0, 0.0, 0.0), 22).unwrap();
    let (bundle, tt) = prepare_mapping_task(&task.dataset, &build_cfg(23)).unwrap();
    let cfg = model_cfg(6, 6);
    let params = ModelParams::init(&cfg, 24).unwrap();
    let report = train(&bundle, &params, &cfg, &train_cfg(0.05, 300), &tt).unwrap();
    let initial = report.epoch_loss[0];
    let best = report.epoch_loss.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(best < 0.05 * initial, "loss {initial} -> {best}");
}

#[test]
fn training_is_bit_reproducible_per_seed() {
    let run = || {
        let mut task = gen_synthetic_task(24, 4, 6, 5, 0.1, 31).unwrap();
        split_dataset(&mut task.dataset, (0.8, 0.1, 0.1), 32).unwrap();
        let (bundle, tt) = prepare_mapping_task(&task.dataset, &build_cfg(33)).unwrap();
        let cfg = model_cfg(6, 5);
        let params = ModelParams::init(&cfg, 34).unwrap();
        let report = train(&bundle, &params, &cfg, &train_cfg(0.05, 60), &tt).unwrap();
        (report.epoch_loss, params.snapshot())
    };
    let (loss_a, params_a) = run();
    let (loss_b, params_b) = run();
    let bits = |v: &[f64]| -> Vec<u64> { v.iter().map(|x| x.to_bits()).collect() };
    assert_eq!(bits(&loss_a), bits(&loss_b));
    for (a, b) in params_a.iter().zip(&params_b) {
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn best_validation_epoch_is_restored() {
    let mut task = gen_synthetic_task(30, 3, 8, 6, 0.1, 41).unwrap();
    split_dataset(&mut task.dataset, (0.6, 0.2, 0.2), 42).unwrap();
    let (bundle, tt) = prepare_mapping_task(&task.dataset, &build_cfg(43)).unwrap();
    let cfg = model_cfg(8, 6);
    let params = ModelParams::init(&cfg, 44).unwrap();
    let report = train(&bundle, &params, &cfg, &train_cfg(0.05, 100), &tt).unwrap();
    assert!(report.best_epoch >= 1 && report.best_epoch <= 100);
    assert!(!report.eval_history.is_empty());
    assert!(report.final_metric("test_accuracy").is_some());
    // Restored parameters reproduce the recorded validation score.
    let eval = rrnet_core::train::evaluate(&bundle, &params, &cfg, &tt).unwrap();
    assert_eq!(eval.len(), 1);
}

#[test]
fn rating_task_end_to_end_beats_midpoint_baseline() {
    use rrnet_core::train::data::{Features, GroundTruth, RatingRecord, Split, TaskDataset};
    use rrnet_core::train::prepare_rating_task;

    // A small user/item grid with user- and item-dependent ratings.
    let (n_users, n_items) = (12, 9);
    let mut records = Vec::new();
    for u in 0..n_users {
        for i in 0..n_items {
            if (u + i) % 2 == 0 {
                let rating = 1.0 + ((u % 3) + (i % 3)) as f64 * 0.75;
                records.push(RatingRecord { user: u, item: i, rating });
            }
        }
    }
    let n = records.len();
    let mut ds = TaskDataset {
        feat1: Features::UniformSpec { n: n_users, dim: 16 },
        feat2: Features::UniformSpec { n: n_items, dim: 16 },
        truth: GroundTruth::Ratings { records, r_min: 1.0, r_max: 4.0 },
        splits: vec![Split::Train; n],
        confidence: None,
        social_pairs: vec![(0, 1), (1, 2), (3, 4)],
    };
    split_dataset(&mut ds, (0.7, 0.15, 0.15), 51).unwrap();
    let (bundle, tt) = prepare_rating_task(&ds, &build_cfg(52), 10_000).unwrap();
    let cfg = ModelConfig { raw_dim1: 16, raw_dim2: 16, ..model_cfg(16, 16) };
    let params = ModelParams::init(&cfg, 53).unwrap();
    let report = train(&bundle, &params, &cfg, &train_cfg(0.05, 200), &tt).unwrap();
    let mae = report.final_metric("test_mae").unwrap();
    let rmse = report.final_metric("test_rmse").unwrap();
    assert!(mae <= rmse);
    // Midpoint predictor on this grid is off by ~0.7 on average.
    assert!(mae < 0.7, "test MAE {mae}");
}
