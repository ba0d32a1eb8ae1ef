// Calibration probe for the synthetic dataset difficulty knobs: prints the
// faster-learner gap (criterion-3 shape), the additional-class drop
// (criterion-4 shape), and a small filtering run per generator.
use std::time::Instant;
use uefilter::data::{generate_synthetic, mix, SynthSpec};
use uefilter::filtering::{run, FilterConfig};
use uefilter::harness::{generate_perturbations, truth_of, GeneratorKind, PoisonSetup};
use uefilter::metrics::{confusion, rates};
use uefilter::poisons::apply;
use uefilter::trainer::{learning_curves, ClassifierConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let mode = args.get(2).map(|s| s.as_str()).unwrap_or("curves");
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);

    let spec = SynthSpec {
        num_samples: n + n / 2,
        num_classes: 10,
        seed,
        ..SynthSpec::default()
    };
    let full = generate_synthetic(&spec).unwrap();
    let base = uefilter::harness::load_source(
        &uefilter::harness::DatasetSource::Synthetic(spec.clone()),
        Some(n),
    )
    .unwrap();
    let setup = PoisonSetup::desk_scale();
    let trainer = ClassifierConfig::for_classes(10);

    match mode {
        "quick" => {
            for kind in [GeneratorKind::Ops] {
                let set = generate_perturbations(&base, kind, &setup, seed).unwrap();
                let poisoned = apply(&base, &set, &base.ids()).unwrap();
                let mixed = mix(&base, &poisoned, 0.5, seed).unwrap();
                let rows = learning_curves(&mixed, None, &trainer, seed).unwrap();
                for r in &rows {
                    println!("  epoch {}: poisoned {:.3} clean {:.3}", r.epoch, r.acc_poisoned, r.acc_clean);
                }
                let last = rows.last().unwrap();
                let extra: Vec<_> = full.samples()[n..]
                    .iter()
                    .map(|s| {
                        let mut s = s.clone();
                        s.current_label = s.original_label + 10;
                        s
                    })
                    .collect();
                let rows2 = learning_curves(&mixed, Some(&extra), &trainer, seed).unwrap();
                let last2 = rows2.last().unwrap();
                println!(
                    "{kind}: regime1 gap {:.3} | regime2 clean {:.3} drop {:.3}",
                    last.acc_poisoned - last.acc_clean,
                    last2.acc_clean,
                    last.acc_clean - last2.acc_clean,
                );
            }
        }
        "curves" => {
            for kind in [GeneratorKind::Ops, GeneratorKind::Lsp, GeneratorKind::Em] {
                let t0 = Instant::now();
                let set = generate_perturbations(&base, kind, &setup, seed).unwrap();
                let poisoned = apply(&base, &set, &base.ids()).unwrap();
                let mixed = mix(&base, &poisoned, 0.5, seed).unwrap();
                let gen_dt = t0.elapsed().as_secs_f64();

                let rows = learning_curves(&mixed, None, &trainer, seed).unwrap();
                let last = rows.last().unwrap();
                // regime 2: extra clean pool = samples beyond the mixed subset
                let extra: Vec<_> = full.samples()[n..]
                    .iter()
                    .map(|s| {
                        let mut s = s.clone();
                        s.current_label = s.original_label + 10;
                        s
                    })
                    .collect();
                let rows2 = learning_curves(&mixed, Some(&extra), &trainer, seed).unwrap();
                let last2 = rows2.last().unwrap();
                println!(
                    "{kind}: gen {gen_dt:.0}s | regime1 poisoned {:.3} clean {:.3} gap {:.3} | regime2 clean {:.3} drop {:.3}",
                    last.acc_poisoned,
                    last.acc_clean,
                    last.acc_poisoned - last.acc_clean,
                    last2.acc_clean,
                    last.acc_clean - last2.acc_clean,
                );
            }
        }
        "filter" => {
            for kind in [GeneratorKind::Ops, GeneratorKind::Lsp, GeneratorKind::Em] {
                let t0 = Instant::now();
                let set = generate_perturbations(&base, kind, &setup, seed).unwrap();
                let poisoned = apply(&base, &set, &base.ids()).unwrap();
                for ratio in [0.8, 0.6] {
                    let mixed = mix(&base, &poisoned, ratio, seed).unwrap();
                    let config = FilterConfig {
                        seed,
                        ..FilterConfig::default()
                    };
                    let t1 = Instant::now();
                    let report = run(&mixed, &config).unwrap();
                    let truth = truth_of(&mixed).unwrap();
                    let r = rates(confusion(&report, &truth).unwrap());
                    println!(
                        "{kind} r={ratio}: acc {:.3} far {:.3} frr {:.3} HTER {:.3} | iters {} reason {:?} | {:.0}s (gen {:.0}s)",
                        r.accuracy,
                        r.far,
                        r.frr,
                        r.hter,
                        report.history.len(),
                        report.terminal_reason,
                        t1.elapsed().as_secs_f64(),
                        t0.elapsed().as_secs_f64(),
                    );
                    for rec in &report.history {
                        println!(
                            "  it {}: trained {} newly {} retrieved {} flagged_after {}",
                            rec.iteration, rec.trained_on, rec.newly_flagged, rec.retrieved, rec.flagged_after
                        );
                    }
                }
            }
        }
        other => eprintln!("unknown mode {other}"),
    }
}
