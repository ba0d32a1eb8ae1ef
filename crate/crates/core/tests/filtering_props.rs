//! Property tests for the detection loop, driven by scripted models so no
//! real training happens.

use proptest::prelude::*;
use std::collections::{BTreeSet, HashMap};
use uefilter::data::{generate_synthetic, MixedDataset, SynthSpec};
use uefilter::filtering::{
    run_with_factory, FilterConfig, ScriptedFactory, TerminalReason, Verdict,
};

fn tiny_dataset(n: usize, c: u16) -> MixedDataset {
    generate_synthetic(&SynthSpec {
        num_samples: n,
        num_classes: c,
        height: 8,
        width: 8,
        seed: 1234,
        ..SynthSpec::default()
    })
    .unwrap()
}

/// Random scripts: each (iteration, id) entry forces some prediction in
/// [0, 2C).
fn script_strategy(
    n_samples: u64,
    c: u16,
    max_iters: u32,
) -> impl Strategy<Value = Vec<((u32, u64), u16)>> {
    prop::collection::vec(
        (
            (1..=max_iters, 0..n_samples),
            0..(2 * c),
        ),
        0..80,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn loop_invariants_hold_for_arbitrary_scripts(
        entries in script_strategy(24, 3, 6),
        seed in 0u64..1000,
        k in 1u32..4,
        use_ac in any::<bool>(),
        use_retrieval in any::<bool>(),
    ) {
        let ds = tiny_dataset(24, 3);
        let config = FilterConfig {
            retrieval_period: k,
            max_iterations: 6,
            stop_threshold_fraction: 0.05,
            use_additional_classes: use_ac,
            use_retrieval,
            seed,
            ..FilterConfig::default()
        };
        let mut factory = ScriptedFactory::new(entries);
        let report = run_with_factory(&ds, &config, &mut factory).unwrap();

        // Termination within the cap.
        prop_assert!(report.history.len() <= 6);

        // Exactly one verdict per sample; ids partition the dataset.
        let ids: BTreeSet<u64> = report.verdicts.iter().map(|v| v.id).collect();
        prop_assert_eq!(ids.len(), ds.len());

        // Label recoverability: every verdict keeps the original label.
        for v in &report.verdicts {
            prop_assert_eq!(v.original_label, ds.get(v.id).unwrap().original_label);
        }

        // Flag-set arithmetic: replaying newly_flagged/retrieved from the
        // history reproduces the final clean set, and between retrievals the
        // flagged set only grows.
        let mut flagged: BTreeSet<u64> = BTreeSet::new();
        for rec in &report.history {
            for id in &rec.newly_flagged_ids {
                prop_assert!(flagged.insert(*id), "flagged an already-flagged id");
            }
            if !use_retrieval {
                prop_assert_eq!(rec.retrieved, 0);
            }
            for id in &rec.retrieved_ids {
                prop_assert!(flagged.remove(id), "retrieved an unflagged id");
            }
            prop_assert_eq!(rec.newly_flagged, rec.newly_flagged_ids.len());
            prop_assert_eq!(rec.retrieved, rec.retrieved_ids.len());
            prop_assert_eq!(rec.flagged_after, flagged.len());
            prop_assert_eq!(rec.active_after, ds.len() - flagged.len());
        }
        let clean_ids: BTreeSet<u64> = report
            .verdicts
            .iter()
            .filter(|v| v.verdict == Verdict::Clean)
            .map(|v| v.id)
            .collect();
        prop_assert_eq!(clean_ids, flagged);

        // Stopping rule: strict threshold or the cap.
        let thre = uefilter::filtering::stop_threshold(0.05, ds.len());
        match report.terminal_reason {
            TerminalReason::Threshold => {
                if let Some(last) = report.history.last() {
                    prop_assert!(last.newly_flagged < thre);
                }
            }
            TerminalReason::MaxIterations => {
                prop_assert!(report.history.len() == 6 || report.history.is_empty());
            }
        }
        // Every non-final iteration must have flagged at least N_thre.
        for rec in &report.history[..report.history.len().saturating_sub(1)] {
            prop_assert!(rec.newly_flagged >= thre);
        }
    }

    #[test]
    fn detection_is_deterministic_per_seed(
        entries in script_strategy(16, 2, 4),
        seed in 0u64..100,
    ) {
        let ds = tiny_dataset(16, 2);
        let config = FilterConfig {
            max_iterations: 4,
            stop_threshold_fraction: 0.05,
            seed,
            ..FilterConfig::default()
        };
        let mut fa = ScriptedFactory::new(entries.clone());
        let mut fb = ScriptedFactory::new(entries);
        let a = run_with_factory(&ds, &config, &mut fa).unwrap();
        let b = run_with_factory(&ds, &config, &mut fb).unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}

#[test]
fn verdicts_and_truth_agree_on_counts() {
    // Sanity: confusion over a scripted run matches hand-tallied counts.
    let ds = tiny_dataset(12, 2);
    let config = FilterConfig {
        max_iterations: 1,
        stop_threshold_fraction: 0.05,
        seed: 0,
        ..FilterConfig::default()
    };
    let ids = ds.ids();
    let (_, test_ids) = uefilter::data::split_random(&ids, 0.5, 1).unwrap();
    // Flag the first two test ids.
    let script: Vec<((u32, u64), u16)> = test_ids
        .iter()
        .take(2)
        .map(|&id| {
            let y = ds.get(id).unwrap().original_label;
            ((1u32, id), y + 2)
        })
        .collect();
    let mut factory = ScriptedFactory::new(script);
    let report = run_with_factory(&ds, &config, &mut factory).unwrap();

    let truth: HashMap<u64, bool> = ds.ids().into_iter().map(|id| (id, true)).collect();
    let counts = uefilter::metrics::confusion(&report, &truth).unwrap();
    assert_eq!(counts.fn_, 2);
    assert_eq!(counts.tp, 10);
    assert_eq!(counts.total(), 12);
}
