//! Synthetic class-structured image generator.
//!
//! The class signal is compositional: every image carries two glyphs drawn
//! from per-bank pattern alphabets, the first chosen uniformly at random per
//! sample and the second fixed so that `(first + second) mod C` equals the
//! class. Each glyph alone carries no label information, so no single linear
//! feature separates the classes; a network must combine both glyphs, which
//! keeps clean learning slow relative to the linear shortcuts the poison
//! generators inject. That ordering is the regime the detection experiments
//! rely on.
//!
//! Pixel values stay inside `[margin, 1-margin]` so that norm-bounded
//! perturbations applied later are not distorted by clipping.

use super::{DataError, DatasetMeta, Image, ImageShape, MixedDataset, SampleRecord};
use crate::exec::{map_chunks, ExecMode};
use crate::rng::{stream, tags};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::f32::consts::TAU;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_samples: usize,
    pub num_classes: u16,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Peak strength of each glyph.
    pub signal_amplitude: f32,
    /// Std-dev of the per-pixel noise.
    pub noise_sigma: f32,
    /// Max circular translation applied per sample, in pixels.
    pub max_shift: usize,
    /// Pixels are clamped to `[margin, 1-margin]`.
    pub pixel_margin: f32,
    /// How many classes the first glyph leaves plausible. The first glyph
    /// narrows the label to `pair_spread` candidates (a fast marginal cue),
    /// the second glyph disambiguates (the slow compositional cue).
    pub pair_spread: u16,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_samples: 1000,
            num_classes: 10,
            channels: 3,
            height: 32,
            width: 32,
            seed: 0,
            signal_amplitude: 0.25,
            noise_sigma: 0.05,
            max_shift: 4,
            pixel_margin: 0.1,
            pair_spread: 6,
        }
    }
}

const SAMPLE_TAG_BASE: u64 = 0x1_0000_0000;

/// One glyph: a smooth random pattern confined to a box, zero outside.
struct Glyph {
    // [channel][y][x] over the full image grid
    values: Vec<f32>,
}

impl Glyph {
    /// Sum of a few random sinusoids windowed to the box, peak-normalized.
    #[allow(clippy::too_many_arguments)]
    fn sample<R: Rng>(
        rng: &mut R,
        channels: usize,
        height: usize,
        width: usize,
        y0: usize,
        y1: usize,
        x0: usize,
        x1: usize,
    ) -> Glyph {
        let mut values = vec![0.0f32; channels * height * width];
        let (bh, bw) = (y1 - y0, x1 - x0);
        for ch in 0..channels {
            for _ in 0..3 {
                let fy = rng.gen_range(1..=3) as f32;
                let fx = rng.gen_range(1..=3) as f32;
                let phase: f32 = rng.gen_range(0.0..TAU);
                let amp: f32 = rng.gen_range(0.5..1.0);
                for y in y0..y1 {
                    for x in x0..x1 {
                        let arg = TAU
                            * (fx * (x - x0) as f32 / bw as f32
                                + fy * (y - y0) as f32 / bh as f32)
                            + phase;
                        values[(ch * height + y) * width + x] += amp * arg.sin();
                    }
                }
            }
        }
        let peak = values.iter().fold(0.0f32, |a, v| a.max(v.abs()));
        if peak > 0.0 {
            for v in &mut values {
                *v /= peak;
            }
        }
        Glyph { values }
    }

    fn at(&self, ch: usize, y: usize, x: usize, height: usize, width: usize) -> f32 {
        self.values[(ch * height + y) * width + x]
    }
}

/// Generate a deterministic synthetic dataset. Sample `i` depends only on
/// `(seed, i)`, so a larger run with the same seed extends a smaller one.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<MixedDataset, DataError> {
    if spec.num_samples == 0 {
        return Err(DataError::Invalid("num_samples must be positive".into()));
    }
    if spec.num_classes == 0 {
        return Err(DataError::Invalid("num_classes must be positive".into()));
    }
    let shape = ImageShape {
        channels: spec.channels,
        height: spec.height,
        width: spec.width,
    };
    if shape.is_empty() {
        return Err(DataError::Invalid("image shape must be non-empty".into()));
    }
    if spec.height < 8 || spec.width < 8 {
        return Err(DataError::Invalid(
            "synthetic images need spatial dims of at least 8".into(),
        ));
    }
    if spec.pair_spread == 0 || spec.pair_spread > spec.num_classes {
        return Err(DataError::Invalid(format!(
            "pair_spread {} outside [1, num_classes]",
            spec.pair_spread
        )));
    }

    // Two side-by-side glyph boxes spanning the middle band of the image.
    let y0 = spec.height / 4;
    let y1 = spec.height - spec.height / 4;
    let mid = spec.width / 2;
    let box_a = (y0, y1, 0usize, mid);
    let box_b = (y0, y1, mid, spec.width);

    let c = spec.num_classes as usize;
    let mut glyph_rng = stream(spec.seed, tags::SYNTH);
    let bank_a: Vec<Glyph> = (0..c)
        .map(|_| {
            Glyph::sample(
                &mut glyph_rng,
                spec.channels,
                spec.height,
                spec.width,
                box_a.0,
                box_a.1,
                box_a.2,
                box_a.3,
            )
        })
        .collect();
    let bank_b: Vec<Glyph> = (0..c)
        .map(|_| {
            Glyph::sample(
                &mut glyph_rng,
                spec.channels,
                spec.height,
                spec.width,
                box_b.0,
                box_b.1,
                box_b.2,
                box_b.3,
            )
        })
        .collect();

    let lo = spec.pixel_margin;
    let hi = 1.0 - spec.pixel_margin;
    let chunks = map_chunks(ExecMode::default(), spec.num_samples, 256, |range| {
        let mut out = Vec::with_capacity(range.len());
        for i in range {
            let label = (i % c) as u16;
            let mut rng = stream(spec.seed, SAMPLE_TAG_BASE + i as u64);
            // The first glyph is one of `pair_spread` rotations of the
            // label; the second encodes which rotation was used, so only the
            // pair determines the class.
            let u = rng.gen_range(0..spec.pair_spread as usize);
            let a = (label as usize + u) % c;
            let b = u;
            let dy = rng.gen_range(0..=2 * spec.max_shift);
            let dx = rng.gen_range(0..=2 * spec.max_shift);
            let jitter: f32 = rng.gen_range(0.8..1.2);
            let brightness: f32 = rng.gen_range(-0.05..0.05);
            let noise = Normal::new(0.0f32, spec.noise_sigma).expect("valid sigma");

            let mut pixels = vec![0.0f32; shape.len()];
            for ch in 0..spec.channels {
                for y in 0..spec.height {
                    let sy = (y + dy) % spec.height;
                    for x in 0..spec.width {
                        let sx = (x + dx) % spec.width;
                        let signal = bank_a[a].at(ch, sy, sx, spec.height, spec.width)
                            + bank_b[b].at(ch, sy, sx, spec.height, spec.width);
                        let n = noise.sample(&mut rng).clamp(-0.3, 0.3);
                        let v = 0.5 + brightness + jitter * spec.signal_amplitude * signal + n;
                        pixels[(ch * spec.height + y) * spec.width + x] = v.clamp(lo, hi);
                    }
                }
            }
            out.push(SampleRecord {
                id: i as u64,
                image: Image::new(shape, pixels).expect("shape matches buffer"),
                original_label: label,
                current_label: label,
                ground_truth_poisoned: None,
            });
        }
        out
    });

    let samples: Vec<SampleRecord> = chunks.into_iter().flatten().collect();
    MixedDataset::new(
        samples,
        spec.num_classes,
        DatasetMeta {
            generator: None,
            poison_ratio: None,
            seed: Some(spec.seed),
        },
    )
}
