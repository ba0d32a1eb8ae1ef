//! One-pixel shortcut: each class gets a distinct pixel position driven to a
//! class-specific extreme value.

use super::{NormKind, PerturbationBudget, PerturbationSet, PoisonError};
use crate::data::MixedDataset;
use crate::rng::{stream, tags};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeMap;
use std::sync::Arc;

/// Generate the OPS set: a seed-deterministic distinct (row, col) position
/// per class and a 0-or-1 target per channel; each sample's delta drives
/// exactly that position to the class target.
pub fn generate_ops(
    dataset: &MixedDataset,
    budget: &PerturbationBudget,
    seed: u64,
) -> Result<PerturbationSet, PoisonError> {
    if budget.norm != NormKind::L0 {
        return Err(PoisonError::Validation(format!(
            "OPS needs an l0 budget, got {}",
            budget.norm
        )));
    }
    if budget.bound != 1.0 {
        return Err(PoisonError::Validation(
            "OPS supports exactly one modified pixel position (bound = 1)".into(),
        ));
    }
    let shape = dataset.image_shape();
    let classes = dataset.num_classes() as usize;
    let positions_available = shape.height * shape.width;
    if classes > positions_available {
        return Err(PoisonError::Validation(format!(
            "{classes} classes need distinct positions but the image has only {positions_available}"
        )));
    }

    let mut rng = stream(seed, tags::OPS);
    let mut all_positions: Vec<usize> = (0..positions_available).collect();
    all_positions.shuffle(&mut rng);
    let positions = &all_positions[..classes];
    let targets: Vec<Vec<f32>> = (0..classes)
        .map(|_| {
            (0..shape.channels)
                .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();

    let plane = shape.height * shape.width;
    let mut entries = BTreeMap::new();
    for s in dataset.samples() {
        let class = s.original_label as usize;
        let pos = positions[class];
        let mut delta = vec![0.0f32; shape.len()];
        for c in 0..shape.channels {
            let idx = c * plane + pos;
            delta[idx] = targets[class][c] - s.image.pixels()[idx];
        }
        entries.insert(s.id, Arc::from(delta));
    }
    PerturbationSet::new("ops", *budget, true, Some(seed), shape, entries)
}
