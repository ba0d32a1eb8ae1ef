// Per-generator iteration-1 view with the current defaults.
use uefilter::data::{generate_synthetic, mix, SynthSpec};
use uefilter::harness::{generate_perturbations, GeneratorKind, PoisonSetup};
use uefilter::poisons::apply;
use uefilter::trainer::{learning_curves, ClassifierConfig};

fn main() {
    let kinds: Vec<GeneratorKind> = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "ops,lsp".into())
        .split(',')
        .map(|s| s.parse().unwrap())
        .collect();
    let spec = SynthSpec {
        num_samples: 4000,
        seed: 1,
        noise_sigma: std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.05),
        signal_amplitude: std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(0.25),
        max_shift: 4,
        pair_spread: std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(6),
        ..SynthSpec::default()
    };
    let base = generate_synthetic(&spec).unwrap();
    let mut setup = PoisonSetup::desk_scale();
    if let Some(p) = std::env::args().nth(2).and_then(|s| s.parse().ok()) {
        setup.lsp_patch_size = p;
    }
    for kind in kinds {
        let set = generate_perturbations(&base, kind, &setup, 1).unwrap();
        let poisoned = apply(&base, &set, &base.ids()).unwrap();
        for ratio in [0.5, 0.8] {
            let mixed = mix(&base, &poisoned, ratio, 1).unwrap();
            let trainer = ClassifierConfig::for_classes(10);
            let rows = learning_curves(&mixed, None, &trainer, 1).unwrap();
            let last = rows.last().unwrap();
            println!(
                "{kind} r={ratio}: poisoned {:.3} clean {:.3} gap {:.3}",
                last.acc_poisoned,
                last.acc_clean,
                last.acc_poisoned - last.acc_clean
            );
        }
    }
}
