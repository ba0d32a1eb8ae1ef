//! Unlearnable-example perturbation generators (LSP, OPS, EM) and
//! application of perturbation sets to datasets.
//!
//! Every generator works in `[0, 1]` pixel space and guarantees its norm
//! budget on the applied, post-clip perturbation.

mod archive;
mod em;
mod lsp;
mod ops;

pub use archive::{load_perturbations, save_perturbations};
pub use em::{generate_em, EmConfig};
pub use lsp::generate_lsp;
pub use ops::generate_ops;

use crate::data::{DataError, Image, ImageShape, MixedDataset};
use crate::trainer::TrainError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoisonError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("generation error at step {step}: {msg}")]
    Generation { step: u32, msg: String },
    #[error("no perturbation entry for target id {0}")]
    MissingPerturbation(u64),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error at {path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

/// Norm family of a perturbation budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    #[serde(rename = "linf")]
    Linf,
    #[serde(rename = "l2")]
    L2,
    #[serde(rename = "l0")]
    L0,
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormKind::Linf => "linf",
            NormKind::L2 => "l2",
            NormKind::L0 => "l0",
        })
    }
}

/// Norm family plus bound, measured per image in `[0, 1]` pixel space. For
/// `l0` the bound counts modified spatial positions (all channels of one
/// position count as one).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBudget {
    pub norm: NormKind,
    pub bound: f64,
}

impl PerturbationBudget {
    pub fn em_default() -> Self {
        PerturbationBudget {
            norm: NormKind::Linf,
            bound: 8.0 / 255.0,
        }
    }

    pub fn lsp_default() -> Self {
        PerturbationBudget {
            norm: NormKind::L2,
            bound: 1.0,
        }
    }

    pub fn ops_default() -> Self {
        PerturbationBudget {
            norm: NormKind::L0,
            bound: 1.0,
        }
    }
}

/// Per-sample perturbation tensors from one generator run.
///
/// `class_conditional` is true when the generating rule depends only on the
/// label (LSP, OPS). For OPS the stored tensors still differ per sample (the
/// rule pins a target pixel value, so delta = target - current), while LSP
/// entries of same-label samples are identical.
#[derive(Debug, Clone)]
pub struct PerturbationSet {
    pub generator: String,
    pub budget: PerturbationBudget,
    pub class_conditional: bool,
    pub seed: Option<u64>,
    shape: ImageShape,
    entries: BTreeMap<u64, Arc<[f32]>>,
}

impl PerturbationSet {
    pub fn new(
        generator: impl Into<String>,
        budget: PerturbationBudget,
        class_conditional: bool,
        seed: Option<u64>,
        shape: ImageShape,
        entries: BTreeMap<u64, Arc<[f32]>>,
    ) -> Result<Self, PoisonError> {
        for (id, delta) in &entries {
            if delta.len() != shape.len() {
                return Err(PoisonError::Validation(format!(
                    "perturbation for id {id} has {} values, shape needs {}",
                    delta.len(),
                    shape.len()
                )));
            }
        }
        Ok(PerturbationSet {
            generator: generator.into(),
            budget,
            class_conditional,
            seed,
            shape,
            entries,
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&[f32]> {
        self.entries.get(&id).map(|a| a.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[f32])> {
        self.entries.iter().map(|(id, d)| (*id, d.as_ref()))
    }
}

/// Apply perturbations to `target_ids`: targeted samples get
/// `clip(x + delta, 0, 1)` and a true ground-truth flag; everything else is
/// untouched.
pub fn apply(
    dataset: &MixedDataset,
    perturbations: &PerturbationSet,
    target_ids: &[u64],
) -> Result<MixedDataset, PoisonError> {
    if perturbations.shape() != dataset.image_shape() {
        return Err(PoisonError::Validation(
            "perturbation shape does not match dataset".into(),
        ));
    }
    let targets: std::collections::HashSet<u64> = target_ids.iter().copied().collect();
    for &id in &targets {
        if perturbations.get(id).is_none() {
            return Err(PoisonError::MissingPerturbation(id));
        }
    }
    let mut samples = Vec::with_capacity(dataset.len());
    for s in dataset.samples() {
        if targets.contains(&s.id) {
            let delta = perturbations.get(s.id).unwrap();
            let pixels: Vec<f32> = s
                .image
                .pixels()
                .iter()
                .zip(delta)
                .map(|(&x, &d)| (x + d).clamp(0.0, 1.0))
                .collect();
            let mut poisoned = s.clone();
            poisoned.image = Image::new(dataset.image_shape(), pixels)?;
            poisoned.ground_truth_poisoned = Some(true);
            samples.push(poisoned);
        } else {
            samples.push(s.clone());
        }
    }
    let mut metadata = dataset.metadata.clone();
    metadata.generator = Some(perturbations.generator.clone());
    Ok(MixedDataset::new(samples, dataset.num_classes(), metadata)?)
}

/// max |a - b| over pixels.
pub fn measure_linf(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .fold(0.0, f64::max)
}

/// Euclidean norm of a - b.
pub fn measure_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Number of spatial positions where any channel differs.
pub fn measure_l0_positions(a: &[f32], b: &[f32], shape: ImageShape) -> usize {
    let plane = shape.height * shape.width;
    (0..plane)
        .filter(|&p| (0..shape.channels).any(|c| a[c * plane + p] != b[c * plane + p]))
        .count()
}

/// Check one applied (post-clip) perturbation against a budget.
pub fn satisfies_budget(
    clean: &[f32],
    applied: &[f32],
    shape: ImageShape,
    budget: &PerturbationBudget,
) -> bool {
    match budget.norm {
        NormKind::Linf => measure_linf(clean, applied) <= budget.bound + 1e-9,
        NormKind::L2 => measure_l2(clean, applied) <= budget.bound + 1e-6,
        NormKind::L0 => measure_l0_positions(clean, applied, shape) as f64 <= budget.bound,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};

    fn dataset() -> MixedDataset {
        generate_synthetic(&SynthSpec {
            num_samples: 8,
            num_classes: 2,
            height: 8,
            width: 8,
            seed: 3,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn apply_with_no_targets_is_identity() {
        let ds = dataset();
        let set = PerturbationSet::new(
            "noop",
            PerturbationBudget::lsp_default(),
            true,
            None,
            ds.image_shape(),
            BTreeMap::new(),
        )
        .unwrap();
        let out = apply(&ds, &set, &[]).unwrap();
        for (a, b) in ds.samples().iter().zip(out.samples()) {
            assert_eq!(a.image.pixels(), b.image.pixels());
            assert_eq!(a.ground_truth_poisoned, b.ground_truth_poisoned);
        }
    }

    #[test]
    fn apply_flags_exactly_the_targets() {
        let ds = dataset();
        let mut entries = BTreeMap::new();
        for s in ds.samples() {
            entries.insert(
                s.id,
                vec![0.01f32; ds.image_shape().len()].into(),
            );
        }
        let set = PerturbationSet::new(
            "test",
            PerturbationBudget::em_default(),
            false,
            Some(0),
            ds.image_shape(),
            entries,
        )
        .unwrap();
        let targets = vec![0, 3, 5];
        let out = apply(&ds, &set, &targets).unwrap();
        let flagged: Vec<u64> = out
            .samples()
            .iter()
            .filter(|s| s.ground_truth_poisoned == Some(true))
            .map(|s| s.id)
            .collect();
        assert_eq!(flagged, targets);
        // Labels unchanged everywhere.
        for (a, b) in ds.samples().iter().zip(out.samples()) {
            assert_eq!(a.original_label, b.original_label);
            assert_eq!(a.current_label, b.current_label);
        }
    }

    #[test]
    fn apply_missing_entry_is_an_error() {
        let ds = dataset();
        let set = PerturbationSet::new(
            "test",
            PerturbationBudget::em_default(),
            false,
            None,
            ds.image_shape(),
            BTreeMap::new(),
        )
        .unwrap();
        assert!(matches!(
            apply(&ds, &set, &[1]),
            Err(PoisonError::MissingPerturbation(1))
        ));
    }

    #[test]
    fn applied_clip_respects_pixel_range() {
        let ds = dataset();
        let mut entries = BTreeMap::new();
        for s in ds.samples() {
            entries.insert(s.id, vec![0.9f32; ds.image_shape().len()].into());
        }
        let set = PerturbationSet::new(
            "big",
            PerturbationBudget {
                norm: NormKind::Linf,
                bound: 0.9,
            },
            false,
            None,
            ds.image_shape(),
            entries,
        )
        .unwrap();
        let out = apply(&ds, &set, &ds.ids()).unwrap();
        for s in out.samples() {
            for &v in s.image.pixels() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn norm_measures_agree_with_hand_values() {
        let shape = ImageShape {
            channels: 2,
            height: 1,
            width: 2,
        };
        let a = [0.0, 0.0, 0.0, 0.0];
        let b = [0.3, 0.0, 0.4, 0.0];
        assert!((measure_l2(&a, &b) - 0.5).abs() < 1e-6);
        assert!((measure_linf(&a, &b) - 0.4).abs() < 1e-6);
        // Position 0 differs in both channels, position 1 in none.
        assert_eq!(measure_l0_positions(&a, &b, shape), 1);
    }
}
