// Difficulty/trainer sweep on the compositional synthetic data.
// mode "clean": can the task be learned at all (E=20, clean only)?
// mode "gap":   criterion-3 shape (OPS 50/50, E=5).
use uefilter::data::{generate_synthetic, mix, SynthSpec};
use uefilter::harness::{generate_perturbations, GeneratorKind, PoisonSetup};
use uefilter::poisons::apply;
use uefilter::trainer::{learning_curves, train, ClassifierConfig, TrainItem};

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "gap".into());
    let n = 4000;
    match mode.as_str() {
        "clean" => {
            let spec = SynthSpec {
                num_samples: n + 2000,
                seed: 1,
                ..SynthSpec::default()
            };
            let ds = generate_synthetic(&spec).unwrap();
            let train_items: Vec<TrainItem> =
                ds.samples()[..n].iter().map(TrainItem::from_record).collect();
            for (batch, lr, epochs) in [(8usize, 0.02f32, 20u32), (16, 0.03, 20)] {
                let config = ClassifierConfig {
                    epochs,
                    batch_size: batch,
                    learning_rate: lr,
                    ..ClassifierConfig::for_classes(10)
                };
                let model = train(&train_items, ds.image_shape(), &config).unwrap();
                let eval: Vec<&[f32]> =
                    ds.samples()[n..].iter().map(|s| s.image.pixels()).collect();
                let preds = model.predict(&eval).unwrap();
                let acc = preds
                    .iter()
                    .zip(&ds.samples()[n..])
                    .filter(|(p, s)| **p == s.original_label)
                    .count() as f64
                    / preds.len() as f64;
                let losses: Vec<f32> = model
                    .epoch_mean_losses
                    .iter()
                    .map(|l| (l * 100.0).round() / 100.0)
                    .collect();
                println!("batch {batch} lr {lr}: heldout clean acc {acc:.3} losses {losses:?}");
            }
        }
        "gap" => {
            for (amp, noise, shift, spread) in [
                (0.30f32, 0.12f32, 3usize, 5u16),
                (0.30, 0.12, 3, 6),
                (0.30, 0.12, 3, 8),
                (0.35, 0.10, 2, 6),
                (0.35, 0.12, 3, 5),
            ] {
                let spec = SynthSpec {
                    num_samples: n,
                    seed: 1,
                    signal_amplitude: amp,
                    noise_sigma: noise,
                    max_shift: shift,
                    pair_spread: spread,
                    ..SynthSpec::default()
                };
                let base = generate_synthetic(&spec).unwrap();
                let setup = PoisonSetup::desk_scale();
                let set = generate_perturbations(&base, GeneratorKind::Ops, &setup, 1).unwrap();
                let poisoned = apply(&base, &set, &base.ids()).unwrap();
                let mixed = mix(&base, &poisoned, 0.5, 1).unwrap();
                let trainer = ClassifierConfig::for_classes(10);
                let rows = learning_curves(&mixed, None, &trainer, 1).unwrap();
                let per: Vec<String> = rows
                    .iter()
                    .map(|r| format!("{:.2}/{:.2}", r.acc_poisoned, r.acc_clean))
                    .collect();
                let last = rows.last().unwrap();
                println!(
                    "amp {amp} noise {noise} shift {shift} spread {spread}: gap {:.3} | p/c {per:?}",
                    last.acc_poisoned - last.acc_clean
                );
            }
        }
        other => eprintln!("unknown mode {other}"),
    }
}
