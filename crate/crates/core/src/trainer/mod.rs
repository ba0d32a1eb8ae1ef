//! Classifier training over the expanded label space, with early stopping,
//! batched prediction, and the learning-curve experiment.
//!
//! Training is mini-batch SGD with momentum and global gradient clipping.
//! Batch-norm statistics follow the usual convention: batch statistics while
//! training, frozen running estimates for prediction. All batch work runs
//! through the deterministic chunked maps in [`crate::nn`], so results are
//! identical across thread counts and execution modes.

mod checkpoint;

pub use checkpoint::{load_model, save_model};

use crate::data::{ImageShape, MixedDataset, SampleRecord};
use crate::exec::ExecMode;
use crate::nn::{argmax, resnet18, small_cnn, softmax_xent, Mode, NetError, NetSpec, Network};
use crate::rng::{stream, tags};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const PREDICT_CHUNK: usize = 128;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: u32, batch: usize },
    #[error("experiment error: {0}")]
    Experiment(String),
    #[error("network error: {0}")]
    Net(#[from] NetError),
    #[error("checkpoint error at {path}: {msg}")]
    Checkpoint { path: std::path::PathBuf, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "small-cnn")]
    SmallCnn,
    #[serde(rename = "resnet18")]
    Resnet18,
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "small-cnn" => Ok(Architecture::SmallCnn),
            "resnet18" => Ok(Architecture::Resnet18),
            other => Err(format!("unknown architecture '{other}'")),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::SmallCnn => "small-cnn",
            Architecture::Resnet18 => "resnet18",
        })
    }
}

/// Classifier hyperparameters. `epochs` is the early-stopping horizon: the
/// budget is deliberately short so the model absorbs shortcuts but not the
/// clean signal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub architecture: Architecture,
    /// Logit count; `2 * C` for detection models.
    pub output_dim: u16,
    pub epochs: u32,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub augmentation: bool,
    /// Alternative early-stop rule: finish training early once accuracy over
    /// samples labeled `< C` reaches 99%.
    pub adaptive_early_stop: bool,
    /// Global l2 gradient-norm clip; keeps the high-lr recipe stable on
    /// small networks.
    pub grad_clip: Option<f32>,
    #[serde(skip, default)]
    pub exec_mode: ExecMode,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            architecture: Architecture::SmallCnn,
            output_dim: 20,
            epochs: 5,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 16,
            seed: 0,
            augmentation: false,
            adaptive_early_stop: false,
            grad_clip: Some(1.0),
            exec_mode: ExecMode::default(),
        }
    }
}

impl ClassifierConfig {
    /// Default configuration with a `2C`-way head for `num_classes`.
    pub fn for_classes(num_classes: u16) -> Self {
        ClassifierConfig {
            output_dim: 2 * num_classes,
            ..ClassifierConfig::default()
        }
    }

    pub fn net_spec(&self, input: ImageShape) -> NetSpec {
        match self.architecture {
            Architecture::SmallCnn => small_cnn(input, self.output_dim as usize),
            Architecture::Resnet18 => resnet18(input, self.output_dim as usize),
        }
    }
}

/// One training example: borrowed pixels plus the label to fit.
#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a> {
    pub pixels: &'a [f32],
    pub label: u16,
}

impl<'a> TrainItem<'a> {
    /// View a sample with its current label.
    pub fn from_record(s: &'a SampleRecord) -> Self {
        TrainItem {
            pixels: s.image.pixels(),
            label: s.current_label,
        }
    }
}

/// An immutable trained classifier.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    net: Network,
    params: Vec<f32>,
    stats: Vec<f32>,
    pub config: ClassifierConfig,
    pub input_shape: ImageShape,
    pub epochs_run: u32,
    pub epoch_mean_losses: Vec<f32>,
}

impl TrainedModel {
    pub fn output_dim(&self) -> u16 {
        self.config.output_dim
    }

    pub(crate) fn from_parts(
        config: ClassifierConfig,
        input_shape: ImageShape,
        params: Vec<f32>,
        stats: Vec<f32>,
        epochs_run: u32,
        epoch_mean_losses: Vec<f32>,
    ) -> Result<Self, TrainError> {
        let net = Network::build(config.net_spec(input_shape))?;
        if net.param_len() != params.len() || net.stats_len() != stats.len() {
            return Err(TrainError::Validation(format!(
                "checkpoint buffers ({} params, {} stats) do not match the architecture ({}, {})",
                params.len(),
                stats.len(),
                net.param_len(),
                net.stats_len()
            )));
        }
        Ok(TrainedModel {
            net,
            params,
            stats,
            config,
            input_shape,
            epochs_run,
            epoch_mean_losses,
        })
    }

    pub(crate) fn params(&self) -> &[f32] {
        &self.params
    }

    pub(crate) fn stats(&self) -> &[f32] {
        &self.stats
    }

    /// Argmax prediction over the full logit range, ties toward the smaller
    /// class index. Input images must match the training shape.
    pub fn predict(&self, images: &[&[f32]]) -> Result<Vec<u16>, TrainError> {
        let expected = self.net.input_len();
        for (i, img) in images.iter().enumerate() {
            if img.len() != expected {
                return Err(TrainError::Validation(format!(
                    "image {i} has {} values, model expects {expected}",
                    img.len()
                )));
            }
        }
        Ok(predict_with(
            &self.net,
            &self.params,
            &self.stats,
            images,
            self.config.exec_mode,
        ))
    }

    /// FNV-1a over parameter and statistic bit patterns; used by the
    /// determinism checks.
    pub fn param_checksum(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for v in self.params.iter().chain(self.stats.iter()) {
            for b in v.to_le_bytes() {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        hash
    }
}

/// Eval-mode argmax predictions, chunked to bound peak memory.
fn predict_with(
    net: &Network,
    params: &[f32],
    stats: &[f32],
    images: &[&[f32]],
    exec: ExecMode,
) -> Vec<u16> {
    let out = net.output_dim();
    let mut scratch_stats = stats.to_vec();
    let mut preds = Vec::with_capacity(images.len());
    for chunk in images.chunks(PREDICT_CHUNK) {
        let logits = net.forward_batch(params, &mut scratch_stats, Mode::Eval, chunk, None, exec);
        for i in 0..chunk.len() {
            preds.push(argmax(&logits[i * out..(i + 1) * out]) as u16);
        }
    }
    preds
}

/// Mean loss of one epoch.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: u32,
    pub mean_loss: f32,
}

/// Optimizer state carried across epochs (and across the EM generator's
/// outer steps): parameters, momentum buffer, batch-norm running statistics,
/// epochs completed.
pub type SessionState = (Vec<f32>, Vec<f32>, Vec<f32>, u32);

/// Epoch-stepped training; [`train`] drives it end to end, the
/// learning-curve experiment steps it manually to evaluate between epochs.
pub struct TrainSession<'a> {
    net: Network,
    params: Vec<f32>,
    velocity: Vec<f32>,
    stats: Vec<f32>,
    items: Vec<TrainItem<'a>>,
    shape: ImageShape,
    config: ClassifierConfig,
    epochs_done: u32,
    epoch_mean_losses: Vec<f32>,
}

impl<'a> TrainSession<'a> {
    pub fn new(
        items: &[TrainItem<'a>],
        shape: ImageShape,
        config: &ClassifierConfig,
    ) -> Result<Self, TrainError> {
        Self::with_state(items, shape, config, None)
    }

    /// Resume from explicit optimizer state (used by the EM generator, which
    /// interleaves training with noise updates on its own image buffers).
    pub fn with_state(
        items: &[TrainItem<'a>],
        shape: ImageShape,
        config: &ClassifierConfig,
        state: Option<SessionState>,
    ) -> Result<Self, TrainError> {
        if items.is_empty() {
            return Err(TrainError::Validation("no training samples".into()));
        }
        if config.batch_size == 0 {
            return Err(TrainError::Validation("batch_size must be positive".into()));
        }
        if config.output_dim == 0 {
            return Err(TrainError::Validation("output_dim must be positive".into()));
        }
        for (i, item) in items.iter().enumerate() {
            if item.label >= config.output_dim {
                return Err(TrainError::Validation(format!(
                    "item {i}: label {} outside [0, {})",
                    item.label, config.output_dim
                )));
            }
            if item.pixels.len() != shape.len() {
                return Err(TrainError::Validation(format!(
                    "item {i}: {} pixels, shape needs {}",
                    item.pixels.len(),
                    shape.len()
                )));
            }
        }
        let net = Network::build(config.net_spec(shape))?;
        let (params, velocity, stats, epochs_done) = match state {
            Some((params, velocity, stats, epochs_done)) => {
                if params.len() != net.param_len()
                    || velocity.len() != net.param_len()
                    || stats.len() != net.stats_len()
                {
                    return Err(TrainError::Validation(
                        "resume state does not match architecture".into(),
                    ));
                }
                (params, velocity, stats, epochs_done)
            }
            None => (
                net.init_params(config.seed),
                vec![0.0f32; net.param_len()],
                net.init_stats(),
                0,
            ),
        };
        Ok(TrainSession {
            net,
            params,
            velocity,
            stats,
            items: items.to_vec(),
            shape,
            config: config.clone(),
            epochs_done,
            epoch_mean_losses: Vec::new(),
        })
    }

    pub fn epochs_done(&self) -> u32 {
        self.epochs_done
    }

    /// One full pass over the training set.
    pub fn run_epoch(&mut self) -> Result<EpochStats, TrainError> {
        let epoch = self.epochs_done;
        let n = self.items.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(
            self.config.seed,
            tags::SHUFFLE_BASE + epoch as u64,
        ));

        let exec = self.config.exec_mode;
        let param_len = self.net.param_len();
        let out = self.net.output_dim();
        let mut tape = self.net.new_tape();
        let mut loss_sum = 0.0f64;
        let mut aug_buffers: Vec<Vec<f32>> = Vec::new();
        for (batch_idx, batch) in order.chunks(self.config.batch_size).enumerate() {
            let views: Vec<&[f32]> = if self.config.augmentation {
                aug_buffers.resize_with(batch.len(), || vec![0.0f32; self.shape.len()]);
                for (buf, &idx) in aug_buffers.iter_mut().zip(batch) {
                    augment(
                        self.items[idx].pixels,
                        self.shape,
                        self.config.seed,
                        epoch,
                        idx,
                        buf,
                    );
                }
                aug_buffers.iter().map(|b| b.as_slice()).collect()
            } else {
                batch.iter().map(|&idx| self.items[idx].pixels).collect()
            };

            let logits = self.net.forward_batch(
                &self.params,
                &mut self.stats,
                Mode::Train,
                &views,
                Some(&mut tape),
                exec,
            );
            let inv_batch = 1.0f32 / batch.len() as f32;
            let mut d_logits = vec![0.0f32; logits.len()];
            let mut batch_loss = 0.0f32;
            let mut d = vec![0.0f32; out];
            for (i, &idx) in batch.iter().enumerate() {
                batch_loss += softmax_xent(
                    &logits[i * out..(i + 1) * out],
                    self.items[idx].label as usize,
                    &mut d,
                );
                for (dst, v) in d_logits[i * out..(i + 1) * out].iter_mut().zip(&d) {
                    *dst = v * inv_batch;
                }
            }
            batch_loss *= inv_batch;
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            loss_sum += batch_loss as f64 * batch.len() as f64;

            let mut grads = vec![0.0f32; param_len];
            self.net.backward_batch(
                &self.params,
                &mut tape,
                Mode::Train,
                d_logits,
                Some(&mut grads),
                false,
                exec,
            );

            let mut scale = 1.0f32;
            if let Some(clip) = self.config.grad_clip {
                let norm = grads
                    .iter()
                    .map(|g| (*g as f64) * (*g as f64))
                    .sum::<f64>()
                    .sqrt() as f32;
                if norm > clip {
                    scale = clip / norm;
                }
            }
            let lr = self.config.learning_rate;
            let momentum = self.config.momentum;
            let wd = self.config.weight_decay;
            for i in 0..param_len {
                let g = grads[i] * scale + wd * self.params[i];
                self.velocity[i] = momentum * self.velocity[i] + g;
                self.params[i] -= lr * self.velocity[i];
            }
        }

        self.epochs_done += 1;
        let mean_loss = (loss_sum / n as f64) as f32;
        self.epoch_mean_losses.push(mean_loss);
        Ok(EpochStats { epoch, mean_loss })
    }

    /// Eval-mode predictions with the in-progress parameters.
    pub fn predict_current(&self, images: &[&[f32]]) -> Vec<u16> {
        predict_with(
            &self.net,
            &self.params,
            &self.stats,
            images,
            self.config.exec_mode,
        )
    }

    /// Training accuracy over items whose label is below `threshold`.
    fn train_accuracy_below(&self, threshold: u16) -> f64 {
        let images: Vec<&[f32]> = self.items.iter().map(|it| it.pixels).collect();
        let preds = self.predict_current(&images);
        let mut correct = 0usize;
        let mut total = 0usize;
        for (item, pred) in self.items.iter().zip(preds) {
            if item.label < threshold {
                total += 1;
                if pred == item.label {
                    correct += 1;
                }
            }
        }
        if total == 0 {
            return 1.0;
        }
        correct as f64 / total as f64
    }

    pub fn into_model(self) -> TrainedModel {
        TrainedModel {
            net: self.net,
            params: self.params,
            stats: self.stats,
            config: self.config,
            input_shape: self.shape,
            epochs_run: self.epochs_done,
            epoch_mean_losses: self.epoch_mean_losses,
        }
    }

    pub fn into_state(self) -> SessionState {
        (self.params, self.velocity, self.stats, self.epochs_done)
    }
}

/// Train a fresh classifier for exactly `config.epochs` epochs (fewer when
/// the adaptive early-stop rule is enabled and fires).
pub fn train(
    items: &[TrainItem],
    shape: ImageShape,
    config: &ClassifierConfig,
) -> Result<TrainedModel, TrainError> {
    let mut session = TrainSession::new(items, shape, config)?;
    for _ in 0..config.epochs {
        session.run_epoch()?;
        if config.adaptive_early_stop {
            let first_c = config.output_dim / 2;
            if session.train_accuracy_below(first_c) >= 0.99 {
                break;
            }
        }
    }
    Ok(session.into_model())
}

/// Zero-pad by 4 pixels, randomly crop back, and flip horizontally with
/// probability one half. The draw depends only on (seed, epoch, index).
fn augment(pixels: &[f32], shape: ImageShape, seed: u64, epoch: u32, index: usize, out: &mut [f32]) {
    const PAD: isize = 4;
    let mut rng = stream(
        seed,
        0x2_0000_0000u64 + ((epoch as u64) << 40) + index as u64,
    );
    let dy = rng.gen_range(-PAD..=PAD);
    let dx = rng.gen_range(-PAD..=PAD);
    let flip = rng.gen_bool(0.5);
    let (c, h, w) = (shape.channels, shape.height as isize, shape.width as isize);
    for ch in 0..c {
        let plane = &pixels[ch * (h * w) as usize..(ch + 1) * (h * w) as usize];
        let out_plane = &mut out[ch * (h * w) as usize..(ch + 1) * (h * w) as usize];
        for y in 0..h {
            for x in 0..w {
                let sx = if flip { w - 1 - x } else { x };
                let (iy, ix) = (y + dy, sx + dx);
                out_plane[(y * w + x) as usize] = if iy < 0 || iy >= h || ix < 0 || ix >= w {
                    0.0
                } else {
                    plane[(iy * w + ix) as usize]
                };
            }
        }
    }
}

/// One learning-curve row: held-out accuracy (against original labels) over
/// the poisoned and clean members separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: u32,
    pub acc_poisoned: f64,
    pub acc_clean: f64,
}

/// Train on a random half of `mixed` (plus optional relabeled extra clean
/// samples) and evaluate the held-out half after every epoch, reporting
/// accuracy separately over its poisoned and clean members.
pub fn learning_curves(
    mixed: &MixedDataset,
    extra_clean: Option<&[SampleRecord]>,
    config: &ClassifierConfig,
    eval_split_seed: u64,
) -> Result<Vec<CurveRow>, TrainError> {
    if !mixed.has_ground_truth() {
        return Err(TrainError::Experiment(
            "learning curves need ground-truth flags on every sample".into(),
        ));
    }
    let c = mixed.num_classes();
    if config.output_dim != 2 * c {
        return Err(TrainError::Validation(format!(
            "output_dim {} must be 2C = {}",
            config.output_dim,
            2 * c
        )));
    }
    if let Some(extra) = extra_clean {
        for s in extra {
            if s.current_label < c || s.current_label >= 2 * c {
                return Err(TrainError::Validation(format!(
                    "extra clean sample {} must be relabeled into [C, 2C)",
                    s.id
                )));
            }
        }
    }

    let ids = mixed.ids();
    let (train_ids, eval_ids) = crate::data::split_random(&ids, 0.5, eval_split_seed)
        .map_err(|e| TrainError::Experiment(format!("cannot split for evaluation: {e}")))?;
    let by_id: std::collections::HashMap<u64, &SampleRecord> =
        mixed.samples().iter().map(|s| (s.id, s)).collect();

    let mut items: Vec<TrainItem> = train_ids
        .iter()
        .map(|id| TrainItem::from_record(by_id[id]))
        .collect();
    if let Some(extra) = extra_clean {
        items.extend(extra.iter().map(TrainItem::from_record));
    }

    let eval: Vec<&SampleRecord> = eval_ids.iter().map(|id| by_id[id]).collect();
    let n_poisoned = eval
        .iter()
        .filter(|s| s.ground_truth_poisoned == Some(true))
        .count();
    if n_poisoned == 0 || n_poisoned == eval.len() {
        return Err(TrainError::Experiment(
            "held-out half lacks poisoned or clean members".into(),
        ));
    }

    let shape = mixed.image_shape();
    let mut session = TrainSession::new(&items, shape, config)?;
    let images: Vec<&[f32]> = eval.iter().map(|s| s.image.pixels()).collect();
    let mut rows = Vec::with_capacity(config.epochs as usize + 1);
    for epoch in 0..=config.epochs {
        if epoch > 0 {
            session.run_epoch()?;
        }
        let preds = session.predict_current(&images);
        let mut hits = [0usize; 2];
        let mut totals = [0usize; 2];
        for (s, &pred) in eval.iter().zip(&preds) {
            let k = usize::from(s.ground_truth_poisoned == Some(true));
            totals[k] += 1;
            if pred == s.original_label {
                hits[k] += 1;
            }
        }
        rows.push(CurveRow {
            epoch,
            acc_poisoned: hits[1] as f64 / totals[1] as f64,
            acc_clean: hits[0] as f64 / totals[0] as f64,
        });
    }
    Ok(rows)
}
