//! Linearly separable synthetic perturbations: one random patch per class,
//! tiled across the image and rescaled to an exact l2 norm.

use super::{NormKind, PerturbationBudget, PerturbationSet, PoisonError};
use crate::data::MixedDataset;
use crate::rng::{stream, tags};
use rand::Rng;
use std::collections::BTreeMap;
use std::sync::Arc;

/// Generate the class-conditional LSP set: for each class, draw one
/// `channels x patch_size x patch_size` patch from a symmetric zero-mean
/// distribution, tile it to image size, and scale to `||delta||_2 == bound`.
pub fn generate_lsp(
    dataset: &MixedDataset,
    budget: &PerturbationBudget,
    patch_size: usize,
    seed: u64,
) -> Result<PerturbationSet, PoisonError> {
    if budget.norm != NormKind::L2 {
        return Err(PoisonError::Validation(format!(
            "LSP needs an l2 budget, got {}",
            budget.norm
        )));
    }
    if budget.bound < 0.0 {
        return Err(PoisonError::Validation("negative l2 bound".into()));
    }
    let shape = dataset.image_shape();
    if patch_size == 0 || shape.height % patch_size != 0 || shape.width % patch_size != 0 {
        return Err(PoisonError::Validation(format!(
            "patch_size {patch_size} must divide image dims {}x{}",
            shape.height, shape.width
        )));
    }

    let mut rng = stream(seed, tags::LSP);
    let classes = dataset.num_classes() as usize;
    let mut class_deltas: Vec<Arc<[f32]>> = Vec::with_capacity(classes);
    for _ in 0..classes {
        // One +-1 cell per patch: concentrates the whole l2 budget into one
        // salient pixel per tile instead of spreading it below the image
        // noise floor. Uniform cell choice with a random sign is symmetric
        // and zero-mean.
        let cells = shape.channels * patch_size * patch_size;
        let mut patch = vec![0.0f32; cells];
        let cell = rng.gen_range(0..cells);
        patch[cell] = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        // Tile the patch over the full image.
        let mut delta = vec![0.0f32; shape.len()];
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    let p = (c * patch_size + y % patch_size) * patch_size + x % patch_size;
                    delta[(c * shape.height + y) * shape.width + x] = patch[p];
                }
            }
        }
        let norm = delta.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        let scale = if norm > 0.0 { budget.bound / norm } else { 0.0 };
        for v in &mut delta {
            *v = (*v as f64 * scale) as f32;
        }
        class_deltas.push(delta.into());
    }

    if budget.bound > 0.0 {
        for a in 0..classes {
            for b in a + 1..classes {
                if class_deltas[a] == class_deltas[b] {
                    return Err(PoisonError::Generation {
                        step: 0,
                        msg: format!("classes {a} and {b} drew identical perturbations"),
                    });
                }
            }
        }
    }

    let mut entries = BTreeMap::new();
    for s in dataset.samples() {
        entries.insert(s.id, Arc::clone(&class_deltas[s.original_label as usize]));
    }
    PerturbationSet::new("lsp", *budget, true, Some(seed), shape, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};
    use crate::poisons::{apply, measure_l2};

    fn dataset(c: u16) -> MixedDataset {
        generate_synthetic(&SynthSpec {
            num_samples: 4 * c as usize,
            num_classes: c,
            seed: 17,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn lsp_norms_hit_the_bound_exactly() {
        let ds = dataset(10);
        let set = generate_lsp(&ds, &PerturbationBudget::lsp_default(), 8, 1).unwrap();
        let zero = vec![0.0f32; ds.image_shape().len()];
        for (_, delta) in set.iter() {
            let norm = measure_l2(&zero, delta);
            assert!((norm - 1.0).abs() <= 1e-6, "norm {norm}");
        }
    }

    #[test]
    fn lsp_is_class_conditional_and_distinct() {
        let ds = dataset(5);
        let set = generate_lsp(&ds, &PerturbationBudget::lsp_default(), 8, 2).unwrap();
        let samples = ds.samples();
        for a in samples {
            for b in samples {
                let da = set.get(a.id).unwrap();
                let db = set.get(b.id).unwrap();
                if a.original_label == b.original_label {
                    assert_eq!(da, db);
                } else {
                    assert_ne!(da, db);
                }
            }
        }
    }

    #[test]
    fn lsp_zero_bound_is_identity() {
        let ds = dataset(3);
        let set = generate_lsp(
            &ds,
            &PerturbationBudget {
                norm: NormKind::L2,
                bound: 0.0,
            },
            8,
            3,
        )
        .unwrap();
        let out = apply(&ds, &set, &ds.ids()).unwrap();
        for (a, b) in ds.samples().iter().zip(out.samples()) {
            assert_eq!(a.image.pixels(), b.image.pixels());
        }
    }

    #[test]
    fn lsp_rejects_bad_patch_size() {
        let ds = dataset(2);
        assert!(generate_lsp(&ds, &PerturbationBudget::lsp_default(), 7, 0).is_err());
        assert!(generate_lsp(&ds, &PerturbationBudget::lsp_default(), 0, 0).is_err());
    }

    #[test]
    fn lsp_is_seed_deterministic() {
        let ds = dataset(4);
        let a = generate_lsp(&ds, &PerturbationBudget::lsp_default(), 8, 9).unwrap();
        let b = generate_lsp(&ds, &PerturbationBudget::lsp_default(), 8, 9).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.0, y.0);
            assert_eq!(x.1, y.1);
        }
    }
}
