//! Error-minimizing noise: alternating bi-level scheme that trains a
//! reference classifier on the currently perturbed data, then takes
//! sign-gradient-descent steps on each delta to minimize the loss at the
//! true label, projecting onto the l-inf ball and the valid pixel box.
//!
//! Noise steps run the network in eval mode (frozen batch-norm statistics
//! from the reference training), so each sample's gradient is independent of
//! the others in its batch.

use super::{NormKind, PerturbationBudget, PerturbationSet, PoisonError};
use crate::data::MixedDataset;
use crate::exec::ExecMode;
use crate::nn::{softmax_xent, Mode, Network};
use crate::trainer::{ClassifierConfig, SessionState, TrainError, TrainItem, TrainSession};
use std::collections::BTreeMap;
use std::sync::Arc;

/// Samples per forward/backward pass in the noise loop.
const EM_BATCH: usize = 64;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EmConfig {
    pub outer_steps: u32,
    pub inner_noise_steps: u32,
    pub step_size: f32,
    /// Reference-classifier epochs per outer step.
    pub epochs_per_outer_step: u32,
    /// Share one delta per class instead of one per sample.
    pub class_wise: bool,
    #[serde(skip, default)]
    pub exec_mode: ExecMode,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            outer_steps: 10,
            inner_noise_steps: 20,
            step_size: 0.8 / 255.0,
            epochs_per_outer_step: 1,
            class_wise: false,
            exec_mode: ExecMode::default(),
        }
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Generate sample-wise (or class-wise) error-minimizing noise under an
/// l-inf budget.
pub fn generate_em(
    dataset: &MixedDataset,
    budget: &PerturbationBudget,
    trainer_config: &ClassifierConfig,
    em_config: &EmConfig,
) -> Result<PerturbationSet, PoisonError> {
    if budget.norm != NormKind::Linf {
        return Err(PoisonError::Validation(format!(
            "EM needs an l-inf budget, got {}",
            budget.norm
        )));
    }
    if budget.bound < 0.0 {
        return Err(PoisonError::Validation("negative l-inf bound".into()));
    }
    if trainer_config.output_dim < dataset.num_classes() {
        return Err(PoisonError::Validation(format!(
            "reference classifier has {} outputs for {} classes",
            trainer_config.output_dim,
            dataset.num_classes()
        )));
    }
    let shape = dataset.image_shape();
    let bound = budget.bound as f32;
    let samples = dataset.samples();
    let labels: Vec<u16> = samples.iter().map(|s| s.original_label).collect();

    let mut deltas: Vec<Vec<f32>> = vec![vec![0.0f32; shape.len()]; samples.len()];
    let mut perturbed: Vec<Vec<f32>> = samples
        .iter()
        .map(|s| s.image.pixels().to_vec())
        .collect();

    let net = Network::build(trainer_config.net_spec(shape)).map_err(TrainError::from)?;
    let mut opt_state: Option<SessionState> = None;

    for outer in 0..em_config.outer_steps {
        // (a) advance the reference classifier on the current perturbed data
        let items: Vec<TrainItem> = perturbed
            .iter()
            .zip(&labels)
            .map(|(pixels, &label)| TrainItem {
                pixels,
                label,
            })
            .collect();
        let mut session =
            TrainSession::with_state(&items, shape, trainer_config, opt_state.take())?;
        for _ in 0..em_config.epochs_per_outer_step {
            session.run_epoch().map_err(|e| match e {
                TrainError::NonFiniteLoss { .. } => PoisonError::Generation {
                    step: outer,
                    msg: e.to_string(),
                },
                other => PoisonError::Train(other),
            })?;
        }
        drop(items);
        let state = session.into_state();

        // (b) descend each delta toward minimal loss at the true label
        for inner in 0..em_config.inner_noise_steps {
            let grads = input_gradients(
                &net,
                &state.0,
                &state.2,
                &perturbed,
                &labels,
                em_config.exec_mode,
            )
            .map_err(|msg| PoisonError::Generation {
                step: outer,
                msg: format!("{msg} in inner step {inner}"),
            })?;
            if em_config.class_wise {
                class_wise_update(
                    dataset, &labels, &grads, &mut deltas, &mut perturbed, bound, em_config,
                );
            } else {
                for (idx, grad) in grads.iter().enumerate() {
                    let clean = samples[idx].image.pixels();
                    let delta = &mut deltas[idx];
                    for ((d, g), &x) in delta.iter_mut().zip(grad).zip(clean) {
                        *d = (*d - em_config.step_size * sign(*g)).clamp(-bound, bound);
                        // keep x + delta inside [0, 1] exactly
                        *d = (*d).clamp(-x, 1.0 - x);
                    }
                    for ((p, &d), &x) in perturbed[idx].iter_mut().zip(&deltas[idx]).zip(clean) {
                        *p = x + d;
                    }
                }
            }
        }
        opt_state = Some(state);
    }

    let mut entries = BTreeMap::new();
    for (s, delta) in samples.iter().zip(deltas) {
        entries.insert(s.id, Arc::from(delta));
    }
    PerturbationSet::new(
        "em",
        *budget,
        em_config.class_wise,
        Some(trainer_config.seed),
        shape,
        entries,
    )
}

/// Per-sample loss gradients w.r.t. the inputs, eval-mode batch norm.
fn input_gradients(
    net: &Network,
    params: &[f32],
    stats: &[f32],
    perturbed: &[Vec<f32>],
    labels: &[u16],
    exec: ExecMode,
) -> Result<Vec<Vec<f32>>, String> {
    let out = net.output_dim();
    let in_len = net.input_len();
    let mut stats_scratch = stats.to_vec();
    let mut tape = net.new_tape();
    let mut grads = Vec::with_capacity(perturbed.len());
    for (chunk_idx, chunk) in perturbed.chunks(EM_BATCH).enumerate() {
        let views: Vec<&[f32]> = chunk.iter().map(|p| p.as_slice()).collect();
        let logits = net.forward_batch(
            params,
            &mut stats_scratch,
            Mode::Eval,
            &views,
            Some(&mut tape),
            exec,
        );
        let base = chunk_idx * EM_BATCH;
        let mut d_logits = vec![0.0f32; logits.len()];
        let mut d = vec![0.0f32; out];
        for i in 0..views.len() {
            let loss = softmax_xent(
                &logits[i * out..(i + 1) * out],
                labels[base + i] as usize,
                &mut d,
            );
            if !loss.is_finite() {
                return Err("non-finite loss".into());
            }
            d_logits[i * out..(i + 1) * out].copy_from_slice(&d);
        }
        let dx = net
            .backward_batch(
                params,
                &mut tape,
                Mode::Eval,
                d_logits,
                None,
                true,
                exec,
            )
            .expect("input gradients requested");
        for i in 0..views.len() {
            grads.push(dx[i * in_len..(i + 1) * in_len].to_vec());
        }
    }
    Ok(grads)
}

/// One shared sign step per class from the summed class gradient.
fn class_wise_update(
    dataset: &MixedDataset,
    labels: &[u16],
    grads: &[Vec<f32>],
    deltas: &mut [Vec<f32>],
    perturbed: &mut [Vec<f32>],
    bound: f32,
    em_config: &EmConfig,
) {
    let num_classes = dataset.num_classes() as usize;
    let len = dataset.image_shape().len();
    let mut class_grad = vec![vec![0.0f32; len]; num_classes];
    for (idx, grad) in grads.iter().enumerate() {
        let acc = &mut class_grad[labels[idx] as usize];
        for (a, g) in acc.iter_mut().zip(grad) {
            *a += g;
        }
    }
    let mut class_delta = vec![vec![0.0f32; len]; num_classes];
    let mut seen = vec![false; num_classes];
    for (idx, &label) in labels.iter().enumerate() {
        let c = label as usize;
        if !seen[c] {
            class_delta[c] = deltas[idx].clone();
            seen[c] = true;
        }
    }
    for c in 0..num_classes {
        for (d, g) in class_delta[c].iter_mut().zip(&class_grad[c]) {
            *d = (*d - em_config.step_size * sign(*g)).clamp(-bound, bound);
        }
    }
    let samples = dataset.samples();
    for idx in 0..deltas.len() {
        let c = labels[idx] as usize;
        deltas[idx].copy_from_slice(&class_delta[c]);
        let clean = samples[idx].image.pixels();
        for ((p, &d), &x) in perturbed[idx].iter_mut().zip(&deltas[idx]).zip(clean) {
            *p = (x + d).clamp(0.0, 1.0);
        }
    }
}
