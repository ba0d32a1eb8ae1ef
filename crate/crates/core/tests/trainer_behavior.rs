//! Trainer contract tests: determinism, the E=0 case, label validation,
//! loss decrease, and sequential/parallel equivalence.

use uefilter::data::{generate_synthetic, SynthSpec};
use uefilter::exec::ExecMode;
use uefilter::trainer::{train, ClassifierConfig, TrainError, TrainItem};

fn dataset(n: usize, c: u16, seed: u64) -> uefilter::data::MixedDataset {
    generate_synthetic(&SynthSpec {
        num_samples: n,
        num_classes: c,
        height: 16,
        width: 16,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn items(ds: &uefilter::data::MixedDataset) -> Vec<TrainItem<'_>> {
    ds.samples().iter().map(TrainItem::from_record).collect()
}

#[test]
fn identical_config_gives_identical_checksums() {
    let ds = dataset(64, 4, 9);
    let config = ClassifierConfig {
        epochs: 2,
        batch_size: 16,
        seed: 3,
        ..ClassifierConfig::for_classes(4)
    };
    let a = train(&items(&ds), ds.image_shape(), &config).unwrap();
    let b = train(&items(&ds), ds.image_shape(), &config).unwrap();
    assert_eq!(a.param_checksum(), b.param_checksum());

    let other_seed = ClassifierConfig {
        seed: 4,
        ..config.clone()
    };
    let c = train(&items(&ds), ds.image_shape(), &other_seed).unwrap();
    assert_ne!(a.param_checksum(), c.param_checksum());
}

#[test]
fn sequential_and_parallel_training_agree_bitwise() {
    let ds = dataset(48, 3, 2);
    let mut config = ClassifierConfig {
        epochs: 2,
        batch_size: 20,
        seed: 7,
        ..ClassifierConfig::for_classes(3)
    };
    config.exec_mode = ExecMode::Sequential;
    let seq = train(&items(&ds), ds.image_shape(), &config).unwrap();
    config.exec_mode = ExecMode::Parallel;
    let par = train(&items(&ds), ds.image_shape(), &config).unwrap();
    assert_eq!(seq.param_checksum(), par.param_checksum());

    let images: Vec<&[f32]> = ds.samples().iter().map(|s| s.image.pixels()).collect();
    assert_eq!(seq.predict(&images).unwrap(), par.predict(&images).unwrap());
}

#[test]
fn zero_epochs_leaves_initialization_untouched_and_spreads_predictions() {
    let ds = dataset(64, 5, 4);
    let config = ClassifierConfig {
        epochs: 0,
        seed: 11,
        ..ClassifierConfig::for_classes(5)
    };
    let model = train(&items(&ds), ds.image_shape(), &config).unwrap();
    assert_eq!(model.epochs_run, 0);

    // Aggregate argmax over fresh noise inputs should not collapse onto a
    // single class; with a 10-way head, no class should own a majority.
    let noise = dataset(256, 5, 99);
    let images: Vec<&[f32]> = noise.samples().iter().map(|s| s.image.pixels()).collect();
    let preds = model.predict(&images).unwrap();
    let mut counts = vec![0usize; 10];
    for p in &preds {
        counts[*p as usize] += 1;
    }
    let max = *counts.iter().max().unwrap();
    assert!(
        max < preds.len() / 2,
        "untrained model collapsed: counts {counts:?}"
    );
    assert!(preds.iter().all(|&p| p < 10), "prediction outside [0, 2C)");
}

#[test]
fn predictions_are_pure_for_duplicated_images() {
    let ds = dataset(16, 2, 5);
    let config = ClassifierConfig {
        epochs: 1,
        batch_size: 8,
        ..ClassifierConfig::for_classes(2)
    };
    let model = train(&items(&ds), ds.image_shape(), &config).unwrap();
    let img = ds.samples()[0].image.pixels();
    let batch: Vec<&[f32]> = vec![img, ds.samples()[1].image.pixels(), img, img];
    let preds = model.predict(&batch).unwrap();
    assert_eq!(preds[0], preds[2]);
    assert_eq!(preds[0], preds[3]);
}

#[test]
fn out_of_range_labels_are_rejected_before_training() {
    let ds = dataset(8, 2, 1);
    let mut bad_items = items(&ds);
    bad_items[3].label = 4; // output_dim below
    let config = ClassifierConfig {
        output_dim: 4,
        ..ClassifierConfig::default()
    };
    match train(&bad_items, ds.image_shape(), &config) {
        Err(TrainError::Validation(msg)) => assert!(msg.contains("label"), "{msg}"),
        other => panic!("expected validation error, got {other:?}"),
    }
}

#[test]
fn shape_mismatch_is_rejected_at_predict() {
    let ds = dataset(8, 2, 1);
    let config = ClassifierConfig {
        epochs: 0,
        ..ClassifierConfig::for_classes(2)
    };
    let model = train(&items(&ds), ds.image_shape(), &config).unwrap();
    let short = vec![0.5f32; 10];
    let images: Vec<&[f32]> = vec![&short];
    assert!(matches!(
        model.predict(&images),
        Err(TrainError::Validation(_))
    ));
}

#[test]
fn mean_loss_decreases_from_first_epoch() {
    let ds = dataset(256, 4, 6);
    let config = ClassifierConfig {
        epochs: 4,
        seed: 1,
        ..ClassifierConfig::for_classes(4)
    };
    let model = train(&items(&ds), ds.image_shape(), &config).unwrap();
    let losses = &model.epoch_mean_losses;
    assert_eq!(losses.len(), 4);
    assert!(
        losses[3] < losses[0],
        "loss failed to decrease: {losses:?}"
    );
}

#[test]
fn adaptive_early_stop_halts_before_the_horizon() {
    // Strong-signal easy dataset: accuracy saturates quickly.
    let ds = generate_synthetic(&SynthSpec {
        num_samples: 128,
        num_classes: 2,
        height: 16,
        width: 16,
        seed: 8,
        signal_amplitude: 0.35,
        noise_sigma: 0.02,
        max_shift: 0,
        ..SynthSpec::default()
    })
    .unwrap();
    let config = ClassifierConfig {
        epochs: 40,
        batch_size: 32,
        adaptive_early_stop: true,
        seed: 2,
        ..ClassifierConfig::for_classes(2)
    };
    let model = train(
        &ds.samples().iter().map(TrainItem::from_record).collect::<Vec<_>>(),
        ds.image_shape(),
        &config,
    )
    .unwrap();
    assert!(
        model.epochs_run < 40,
        "expected adaptive stop, ran all {} epochs",
        model.epochs_run
    );
}
