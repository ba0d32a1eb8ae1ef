//! Error-minimizing noise must actually be unlearnable: a classifier trained
//! on a fully EM-poisoned set should generalize far worse than one trained
//! on the clean counterpart.

use uefilter::data::{generate_synthetic, SynthSpec};
use uefilter::harness::load_source;
use uefilter::harness::DatasetSource;
use uefilter::poisons::{apply, generate_em, EmConfig, PerturbationBudget};
use uefilter::trainer::{train, Architecture, ClassifierConfig, TrainItem};

fn accuracy(model: &uefilter::trainer::TrainedModel, ds: &uefilter::data::MixedDataset) -> f64 {
    let images: Vec<&[f32]> = ds.samples().iter().map(|s| s.image.pixels()).collect();
    let preds = model.predict(&images).unwrap();
    preds
        .iter()
        .zip(ds.samples())
        .filter(|(p, s)| **p == s.original_label)
        .count() as f64
        / preds.len() as f64
}

#[test]
fn em_poisoned_training_degrades_clean_test_accuracy() {
    // 2 classes x 500 samples for training, held-out clean test set.
    let spec = SynthSpec {
        num_samples: 1500,
        num_classes: 2,
        seed: 77,
        ..SynthSpec::default()
    };
    let train_set = load_source(&DatasetSource::Synthetic(spec.clone()), Some(1000)).unwrap();
    let full = generate_synthetic(&spec).unwrap();
    let test_set = uefilter::data::MixedDataset::new(
        full.samples()[1000..].to_vec(),
        2,
        Default::default(),
    )
    .unwrap();

    let em_trainer = ClassifierConfig {
        architecture: Architecture::SmallCnn,
        output_dim: 2,
        batch_size: 128,
        seed: 1,
        ..ClassifierConfig::default()
    };
    let set = generate_em(
        &train_set,
        &PerturbationBudget::em_default(),
        &em_trainer,
        &EmConfig {
            outer_steps: 5,
            inner_noise_steps: 8,
            ..EmConfig::default()
        },
    )
    .unwrap();
    let poisoned = apply(&train_set, &set, &train_set.ids()).unwrap();

    let fit = |ds: &uefilter::data::MixedDataset| {
        let items: Vec<TrainItem> = ds.samples().iter().map(TrainItem::from_record).collect();
        let config = ClassifierConfig {
            output_dim: 2,
            epochs: 10,
            seed: 5,
            ..ClassifierConfig::default()
        };
        train(&items, ds.image_shape(), &config).unwrap()
    };
    let clean_model = fit(&train_set);
    let poisoned_model = fit(&poisoned);

    let clean_acc = accuracy(&clean_model, &test_set);
    let poisoned_acc = accuracy(&poisoned_model, &test_set);
    println!("clean-trained {clean_acc:.3}, em-trained {poisoned_acc:.3}");
    assert!(
        clean_acc - poisoned_acc >= 0.20,
        "EM failed to degrade training: clean {clean_acc:.3} vs poisoned {poisoned_acc:.3}"
    );
}
