//! Confusion-matrix construction and detection-quality rates.
//!
//! Convention: the positive class is "poisoned". FAR is the fraction of
//! clean samples flagged poisoned, FRR the fraction of poisoned samples
//! flagged clean, and HTER their arithmetic mean.

use crate::filtering::{DetectionReport, Verdict};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("missing ground truth for sample id {0}")]
    MissingTruth(u64),
}

/// Confusion counts with positive class = poisoned.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Tally verdicts against per-id ground truth (`true` = poisoned).
pub fn confusion(
    report: &DetectionReport,
    truth: &HashMap<u64, bool>,
) -> Result<ConfusionCounts, MetricsError> {
    let mut counts = ConfusionCounts::default();
    for v in &report.verdicts {
        let poisoned = *truth.get(&v.id).ok_or(MetricsError::MissingTruth(v.id))?;
        match (poisoned, v.verdict) {
            (true, Verdict::Poisoned) => counts.tp += 1,
            (true, Verdict::Clean) => counts.fn_ += 1,
            (false, Verdict::Poisoned) => counts.fp += 1,
            (false, Verdict::Clean) => counts.tn += 1,
        }
    }
    Ok(counts)
}

/// Accuracy, FAR, FRR, HTER as fractions in `[0, 1]`. A rate whose
/// denominator is zero is reported as 0 and listed in `degenerate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub accuracy: f64,
    pub far: f64,
    pub frr: f64,
    pub hter: f64,
    pub counts: ConfusionCounts,
    pub degenerate: Vec<String>,
}

pub fn rates(counts: ConfusionCounts) -> Rates {
    let mut degenerate = Vec::new();
    let total = counts.total();
    let accuracy = if total == 0 {
        degenerate.push("accuracy".to_string());
        0.0
    } else {
        (counts.tp + counts.tn) as f64 / total as f64
    };
    let far = if counts.fp + counts.tn == 0 {
        degenerate.push("far".to_string());
        0.0
    } else {
        counts.fp as f64 / (counts.fp + counts.tn) as f64
    };
    let frr = if counts.fn_ + counts.tp == 0 {
        degenerate.push("frr".to_string());
        0.0
    } else {
        counts.fn_ as f64 / (counts.fn_ + counts.tp) as f64
    };
    // (FAR + FRR) / 2, evaluated as one exact integer rational so the result
    // is correctly rounded (summing the two already-rounded rates can land
    // one ulp off clean decimals like 0.075).
    let hter = if counts.fp + counts.tn > 0 && counts.fn_ + counts.tp > 0 {
        let num = (counts.fp as u128) * (counts.fn_ + counts.tp) as u128
            + (counts.fn_ as u128) * (counts.fp + counts.tn) as u128;
        let den = 2u128 * (counts.fp + counts.tn) as u128 * (counts.fn_ + counts.tp) as u128;
        num as f64 / den as f64
    } else {
        (far + frr) / 2.0
    };
    Rates {
        accuracy,
        far,
        frr,
        hter,
        counts,
        degenerate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtering::{DetectionReport, SampleVerdict, TerminalReason, Verdict};

    fn report(verdicts: Vec<(u64, Verdict)>) -> DetectionReport {
        DetectionReport {
            verdicts: verdicts
                .into_iter()
                .map(|(id, verdict)| SampleVerdict {
                    id,
                    original_label: 0,
                    verdict,
                    flagged_iteration: None,
                    retrieval_reversals: 0,
                })
                .collect(),
            terminal_reason: TerminalReason::Threshold,
            history: Vec::new(),
        }
    }

    #[test]
    fn rates_match_reference_values() {
        let r = rates(ConfusionCounts {
            tp: 95,
            fn_: 5,
            fp: 10,
            tn: 90,
        });
        assert_eq!(r.frr, 0.05);
        assert_eq!(r.far, 0.10);
        assert_eq!(r.hter, 0.075);
        assert_eq!(r.accuracy, 0.925);
        assert!(r.degenerate.is_empty());
    }

    #[test]
    fn hter_is_exact_mean_of_far_frr() {
        // 2.1% FAR and 0.9% FRR must combine to exactly 1.5% HTER.
        let far = 0.021;
        let frr = 0.009;
        assert_eq!((far + frr) / 2.0, 0.015);
    }

    #[test]
    fn zero_denominator_rates_are_flagged() {
        let r = rates(ConfusionCounts {
            tp: 4,
            fn_: 1,
            fp: 0,
            tn: 0,
        });
        assert_eq!(r.far, 0.0);
        assert_eq!(r.degenerate, vec!["far".to_string()]);
    }

    #[test]
    fn confusion_enumerates_all_four_cells() {
        let rep = report(vec![
            (0, Verdict::Poisoned),
            (1, Verdict::Clean),
            (2, Verdict::Poisoned),
            (3, Verdict::Clean),
        ]);
        let truth: HashMap<u64, bool> =
            [(0, true), (1, true), (2, false), (3, false)].into_iter().collect();
        let c = confusion(&rep, &truth).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 1,
                fn_: 1,
                fp: 1,
                tn: 1
            }
        );
    }

    #[test]
    fn confusion_all_poisoned_verdicts_on_clean_data() {
        let rep = report(vec![(0, Verdict::Poisoned), (1, Verdict::Poisoned)]);
        let truth: HashMap<u64, bool> = [(0, false), (1, false)].into_iter().collect();
        let c = confusion(&rep, &truth).unwrap();
        assert_eq!(c.fp, 2);
        assert_eq!(c.tp + c.tn + c.fn_, 0);
    }

    #[test]
    fn confusion_requires_full_truth() {
        let rep = report(vec![(7, Verdict::Clean)]);
        let truth = HashMap::new();
        assert!(matches!(
            confusion(&rep, &truth),
            Err(MetricsError::MissingTruth(7))
        ));
    }

    #[test]
    fn swapping_positive_class_swaps_far_frr() {
        // Treating "clean" as the positive class means flipping both the
        // truth flags and the verdict polarity; that role swap must exchange
        // FAR and FRR.
        let verdicts = vec![
            (0u64, Verdict::Poisoned),
            (1, Verdict::Clean),
            (2, Verdict::Poisoned),
            (3, Verdict::Clean),
            (4, Verdict::Poisoned),
        ];
        let truth: HashMap<u64, bool> =
            [(0, true), (1, true), (2, false), (3, false), (4, true)]
                .into_iter()
                .collect();
        let swapped_verdicts: Vec<(u64, Verdict)> = verdicts
            .iter()
            .map(|&(id, v)| {
                (
                    id,
                    match v {
                        Verdict::Poisoned => Verdict::Clean,
                        Verdict::Clean => Verdict::Poisoned,
                    },
                )
            })
            .collect();
        let swapped_truth: HashMap<u64, bool> = truth.iter().map(|(&k, &v)| (k, !v)).collect();

        let r = rates(confusion(&report(verdicts), &truth).unwrap());
        let rs = rates(confusion(&report(swapped_verdicts), &swapped_truth).unwrap());
        assert_eq!(r.far, rs.frr);
        assert_eq!(r.frr, rs.far);
        assert_eq!(r.accuracy, rs.accuracy);
    }
}
