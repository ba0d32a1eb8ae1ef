//! Dataset representation, ingestion, seeded splitting, and clean/poison
//! mixing.
//!
//! Datasets are immutable after construction and cheap to share: pixel
//! buffers sit behind `Arc`, and every randomized operation takes an explicit
//! seed.

mod archive;
mod load;
mod synth;

pub use archive::{load_archive, save_archive};
pub use load::{load_dataset, DatasetFormat};
pub use synth::{generate_synthetic, SynthSpec};

use crate::rng::{stream, tags};
use rand::seq::SliceRandom;
use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("ingestion error at {path}: {msg}")]
    Ingestion { path: PathBuf, msg: String },
    #[error("format error at {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("incompatible datasets: {0}")]
    Incompatible(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("split error: {0}")]
    Split(String),
}

/// (channels, height, width) of one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One image tensor, values in `[0, 1]`, CHW layout behind a shared buffer.
#[derive(Debug, Clone)]
pub struct Image {
    shape: ImageShape,
    data: Arc<[f32]>,
}

impl Image {
    pub fn new(shape: ImageShape, data: Vec<f32>) -> Result<Self, DataError> {
        if data.len() != shape.len() {
            return Err(DataError::Invalid(format!(
                "image buffer has {} values, shape needs {}",
                data.len(),
                shape.len()
            )));
        }
        Ok(Image {
            shape,
            data: data.into(),
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn pixels(&self) -> &[f32] {
        &self.data
    }

    /// Value at (channel, row, col).
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }
}

/// One image with its original label, current (possibly offset) label, and an
/// optional ground-truth poison flag used only for evaluation.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub id: u64,
    pub image: Image,
    pub original_label: u16,
    pub current_label: u16,
    pub ground_truth_poisoned: Option<bool>,
}

/// Provenance recorded on a dataset: which generator poisoned it, at what
/// ratio, and under which seed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetMeta {
    pub generator: Option<String>,
    pub poison_ratio: Option<f64>,
    pub seed: Option<u64>,
}

/// A collection of samples over `num_classes` original classes.
#[derive(Debug, Clone)]
pub struct MixedDataset {
    samples: Vec<SampleRecord>,
    num_classes: u16,
    pub metadata: DatasetMeta,
}

impl MixedDataset {
    /// Validates the module invariants: non-empty, unique ids, labels in
    /// range, `current mod C == original`, uniform image shape, pixel values
    /// in `[0, 1]`.
    pub fn new(
        samples: Vec<SampleRecord>,
        num_classes: u16,
        metadata: DatasetMeta,
    ) -> Result<Self, DataError> {
        if num_classes == 0 {
            return Err(DataError::Invalid("num_classes must be positive".into()));
        }
        if samples.is_empty() {
            return Err(DataError::Invalid("dataset has zero samples".into()));
        }
        let shape = samples[0].image.shape();
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if !seen.insert(s.id) {
                return Err(DataError::Invalid(format!("duplicate sample id {}", s.id)));
            }
            if s.original_label >= num_classes {
                return Err(DataError::Invalid(format!(
                    "sample {}: original_label {} out of range [0, {})",
                    s.id, s.original_label, num_classes
                )));
            }
            if s.current_label >= 2 * num_classes || s.current_label % num_classes != s.original_label {
                return Err(DataError::Invalid(format!(
                    "sample {}: current_label {} inconsistent with original_label {}",
                    s.id, s.current_label, s.original_label
                )));
            }
            if s.image.shape() != shape {
                return Err(DataError::Invalid(format!(
                    "sample {}: image shape differs from the rest of the dataset",
                    s.id
                )));
            }
            if s.image.pixels().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(DataError::Invalid(format!(
                    "sample {}: pixel value outside [0, 1]",
                    s.id
                )));
            }
        }
        Ok(MixedDataset {
            samples,
            num_classes,
            metadata,
        })
    }

    pub fn samples(&self) -> &[SampleRecord] {
        &self.samples
    }

    pub fn num_classes(&self) -> u16 {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_shape(&self) -> ImageShape {
        self.samples[0].image.shape()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.id).collect()
    }

    pub fn get(&self, id: u64) -> Option<&SampleRecord> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// True when every sample carries a ground-truth flag.
    pub fn has_ground_truth(&self) -> bool {
        self.samples.iter().all(|s| s.ground_truth_poisoned.is_some())
    }
}

/// Round-half-up of `x` (the tie-break rule used for split and mix sizes).
pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Partition `ids` into a train part of `round(fraction * |ids|)` elements
/// and the remaining test part, by a seed-deterministic uniform shuffle.
/// Both halves are returned sorted ascending.
pub fn split_random(
    ids: &[u64],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<u64>, Vec<u64>), DataError> {
    if ids.len() < 2 {
        return Err(DataError::Split(format!(
            "cannot split {} id(s) into two non-empty halves",
            ids.len()
        )));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::Split(format!(
            "fraction {fraction} outside (0, 1)"
        )));
    }
    let take = round_half_up(fraction * ids.len() as f64);
    let mut shuffled: Vec<u64> = ids.to_vec();
    shuffled.shuffle(&mut stream(seed, tags::SPLIT));
    let mut train: Vec<u64> = shuffled[..take].to_vec();
    let mut test: Vec<u64> = shuffled[take..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Replace `round(ratio * N)` of the clean samples by their poisoned
/// counterparts, matched by id. Sample order and total count are preserved;
/// every output sample carries a ground-truth flag.
pub fn mix(
    clean: &MixedDataset,
    poisoned: &MixedDataset,
    ratio: f64,
    seed: u64,
) -> Result<MixedDataset, DataError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(DataError::Validation(format!(
            "poison ratio {ratio} outside [0, 1]"
        )));
    }
    if clean.num_classes() != poisoned.num_classes() {
        return Err(DataError::Incompatible(format!(
            "class counts differ: {} vs {}",
            clean.num_classes(),
            poisoned.num_classes()
        )));
    }
    if clean.image_shape() != poisoned.image_shape() {
        return Err(DataError::Incompatible("image shapes differ".into()));
    }
    if clean
        .samples()
        .iter()
        .any(|s| s.ground_truth_poisoned == Some(true))
    {
        return Err(DataError::Validation(
            "clean input contains samples flagged poisoned".into(),
        ));
    }
    if poisoned
        .samples()
        .iter()
        .any(|s| s.ground_truth_poisoned != Some(true))
    {
        return Err(DataError::Validation(
            "poisoned input must have every sample flagged poisoned".into(),
        ));
    }

    let take = round_half_up(ratio * clean.len() as f64);
    let mut ids = clean.ids();
    ids.shuffle(&mut stream(seed, tags::MIX));
    let selected: HashSet<u64> = ids[..take].iter().copied().collect();

    let mut samples = Vec::with_capacity(clean.len());
    for s in clean.samples() {
        if selected.contains(&s.id) {
            let p = poisoned.get(s.id).ok_or_else(|| {
                DataError::Incompatible(format!(
                    "poisoned dataset has no counterpart for id {}",
                    s.id
                ))
            })?;
            if p.original_label != s.original_label {
                return Err(DataError::Incompatible(format!(
                    "id {}: label differs between clean and poisoned inputs",
                    s.id
                )));
            }
            samples.push(p.clone());
        } else {
            let mut kept = s.clone();
            kept.ground_truth_poisoned = Some(false);
            samples.push(kept);
        }
    }

    let metadata = DatasetMeta {
        generator: poisoned.metadata.generator.clone(),
        poison_ratio: Some(ratio),
        seed: Some(seed),
    };
    MixedDataset::new(samples, clean.num_classes(), metadata)
}
