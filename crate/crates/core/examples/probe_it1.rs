// Iteration-1 view: train E=5 on half the mix, measure unseen poisoned/clean
// accuracy, for OPS and LSP at ratios 0.5/0.8 across trainer knobs.
use uefilter::data::{generate_synthetic, mix, SynthSpec};
use uefilter::harness::{generate_perturbations, GeneratorKind, PoisonSetup};
use uefilter::poisons::apply;
use uefilter::trainer::{learning_curves, ClassifierConfig};

fn main() {
    let spec = SynthSpec {
        num_samples: 4000,
        seed: 1,
        ..SynthSpec::default()
    };
    let base = generate_synthetic(&spec).unwrap();
    let setup = PoisonSetup::desk_scale();
    for kind in [GeneratorKind::Ops, GeneratorKind::Lsp] {
        let set = generate_perturbations(&base, kind, &setup, 1).unwrap();
        let poisoned = apply(&base, &set, &base.ids()).unwrap();
        for ratio in [0.5, 0.8] {
            let mixed = mix(&base, &poisoned, ratio, 1).unwrap();
            for (batch, lr) in [(32usize, 0.1f32), (16, 0.1), (16, 0.05), (16, 0.03)] {
                let trainer = ClassifierConfig {
                    batch_size: batch,
                    learning_rate: lr,
                    ..ClassifierConfig::for_classes(10)
                };
                let rows = learning_curves(&mixed, None, &trainer, 1).unwrap();
                let last = rows.last().unwrap();
                println!(
                    "{kind} r={ratio} batch {batch} lr {lr}: poisoned {:.3} clean {:.3}",
                    last.acc_poisoned, last.acc_clean
                );
            }
        }
    }
}
