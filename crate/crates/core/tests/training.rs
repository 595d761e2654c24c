use avgk_core::data::{generate, read_split_dir, write_split_dir, DatasetSplit, Subset, SyntheticSpec};
use avgk_core::losses::{avgk_loss, AvgKConfig};
use avgk_core::math::{LabelVector, LogitMatrix};
use avgk_core::model::{Activation, Checkpoint, TwoHeadMlp};
use avgk_core::training::{train, train_from_seed, validate_model, LossKind, TrainConfig};
use ndarray::{array, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_data() -> DatasetSplit {
    generate(&SyntheticSpec {
        classes: 6,
        superclasses: 3,
        between_sep: 3.0,
        n_train: 400,
        n_val: 200,
        n_test: 200,
        seed: 7,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn quick(loss: LossKind, k: usize) -> TrainConfig {
    TrainConfig {
        loss,
        k_target: k,
        batch_size: 32,
        max_epochs: 4,
        lr_schedule: Vec::new(),
        hidden: vec![16],
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn replay_is_bitwise_identical() {
    let data = small_data();
    for loss in [LossKind::Avgk, LossKind::Ce, LossKind::An, LossKind::Epr, LossKind::BcePos] {
        let cfg = quick(loss, 2);
        let a = train_from_seed(&data, &cfg).unwrap();
        let b = train_from_seed(&data, &cfg).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes(), "{loss}");
        assert_eq!(a.log, b.log, "{loss}");
    }
}

#[test]
fn zero_epochs_returns_initial_model() {
    let data = small_data();
    let cfg = TrainConfig {
        max_epochs: 0,
        ..quick(LossKind::Avgk, 2)
    };
    let arch = cfg.architecture(data.feature_dim(), data.classes);
    let init = TwoHeadMlp::new(&arch, Activation::Tanh, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    let out = train_from_seed(&data, &cfg).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.checkpoint.epoch, 0);
    assert_eq!(out.checkpoint.model, init);
    let (thr, acc) = validate_model(&init, &data, 2).unwrap();
    assert_eq!(out.checkpoint.best_val_accuracy, acc);
    assert_eq!(out.checkpoint.lambda_val, thr.lambda());
}

fn subset(features: Array2<f64>, labels: Vec<usize>, offset: usize) -> Subset {
    let n = labels.len();
    Subset {
        features,
        labels,
        indices: (offset..offset + n).collect(),
    }
}

#[test]
fn separable_pair_reaches_perfect_validation() {
    // Two classes split by the sign of the first feature, plus a third
    // class that never occurs so that K = 1 < L.
    let xs: Array2<f64> = Array2::from_shape_fn((40, 2), |(i, j)| {
        let side = if i % 2 == 0 { 1.0 } else { -1.0 };
        if j == 0 {
            side * (1.0 + (i % 5) as f64 * 0.2)
        } else {
            (i % 7) as f64 * 0.1 - 0.3
        }
    });
    let ys: Vec<usize> = (0..40).map(|i| i % 2).collect();
    let val_x = array![[2.0, 0.0], [-2.0, 0.1], [1.5, -0.2], [-1.2, 0.3]];
    let data = DatasetSplit::new(
        3,
        subset(xs.clone(), ys.clone(), 0),
        subset(val_x.clone(), vec![0, 1, 0, 1], 40),
        subset(val_x, vec![0, 1, 0, 1], 44),
        None,
    )
    .unwrap();
    let cfg = TrainConfig {
        k_target: 1,
        batch_size: 8,
        max_epochs: 50,
        lr_schedule: Vec::new(),
        hidden: vec![8],
        seed: 1,
        ..TrainConfig::default()
    };
    let out = train_from_seed(&data, &cfg).unwrap();
    assert_eq!(out.checkpoint.best_val_accuracy, 1.0);
}

#[test]
fn checkpoint_reproduces_validation_accuracy() {
    let data = small_data();
    let out = train_from_seed(&data, &quick(LossKind::Avgk, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let (thr, acc) = validate_model(&loaded.model, &data, loaded.k_target).unwrap();
    assert_eq!(acc, out.checkpoint.best_val_accuracy);
    assert_eq!(thr.lambda(), out.checkpoint.lambda_val);
}

#[test]
fn best_checkpoint_tracks_the_log() {
    let data = small_data();
    let cfg = TrainConfig {
        max_epochs: 8,
        ..quick(LossKind::Avgk, 2)
    };
    let arch = cfg.architecture(data.feature_dim(), data.classes);
    let model = TwoHeadMlp::new(&arch, Activation::Tanh, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    let (_, initial) = validate_model(&model, &data, 2).unwrap();
    let out = train(model, &data, &cfg).unwrap();
    let best_logged = out.log.iter().map(|r| r.val_avgk_accuracy).fold(initial, f64::max);
    assert_eq!(out.checkpoint.best_val_accuracy, best_logged);
    if out.checkpoint.epoch > 0 {
        assert_eq!(out.log[out.checkpoint.epoch - 1].val_avgk_accuracy, best_logged);
    }
}

#[test]
fn patience_stops_early() {
    let data = small_data();
    let cfg = TrainConfig {
        max_epochs: 200,
        patience: Some(2),
        learning_rate: 1e-9,
        ..quick(LossKind::Avgk, 2)
    };
    let out = train_from_seed(&data, &cfg).unwrap();
    assert!(out.log.len() < 200);
}

#[test]
fn alpha_zero_touches_only_label_columns_of_ml_head() {
    let z = array![[0.3, -1.0, 2.0, 0.1], [1.0, 0.0, -0.5, 0.2]];
    let y = LabelVector::new(vec![2, 0]);
    let zl = LogitMatrix::new(z.clone()).unwrap();
    let out = avgk_loss(&zl, &zl, &y, &AvgKConfig { alpha: 0.0, k_target: 3 }).unwrap();
    for ((i, j), g) in out.grad_ml.indexed_iter() {
        assert_eq!(*g != 0.0, j == y.get(i), "entry ({i}, {j})");
    }
}

#[test]
fn split_dir_round_trip_is_byte_stable() {
    let data = small_data();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_split_dir(&data, a.path()).unwrap();
    let back = read_split_dir(a.path()).unwrap();
    assert_eq!(back.train.features, data.train.features);
    assert_eq!(back.test.labels, data.test.labels);
    assert_eq!(back.class_train_counts, data.class_train_counts);
    write_split_dir(&back, b.path()).unwrap();
    for name in ["train.csv", "val.csv", "test.csv", "manifest.json"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
}
