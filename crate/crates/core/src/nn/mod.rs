//! Compact CNN machinery: layer specs over a flat parameter vector, batched
//! forward/backward passes with batch normalization, and the two reference
//! architectures.
//!
//! Parameters live in one `Vec<f32>` laid out in traversal order, which makes
//! seeded initialization, SGD updates, checksums, and checkpointing trivial.
//! Batch-norm running statistics live in a parallel (non-trained) vector.
//!
//! Batches are processed layer by layer. Per-sample work (convolution GEMMs,
//! activations) is mapped over fixed-size sample chunks; cross-sample
//! reductions (batch-norm statistics, weight gradients) sum the per-chunk
//! results in chunk order, so results are bit-identical between sequential
//! and parallel execution and across thread counts.

pub mod kernels;

use crate::data::ImageShape;
use crate::exec::{map_chunks, ExecMode};
use crate::rng::{stream, tags};
use kernels::{col2im, conv_out_dim, gemm_nn, gemm_nt, gemm_tn, im2col, maxpool2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

const BATCHNORM_EPS: f32 = 1e-5;
const BATCHNORM_MOMENTUM: f32 = 0.1;
/// Samples per work chunk inside a batch.
const SAMPLE_CHUNK: usize = 8;

/// (channels, height, width) of an activation.
pub type Shape = (usize, usize, usize);

fn shape_len(s: Shape) -> usize {
    s.0 * s.1 * s.2
}

/// One layer of a network description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    MaxPool2,
    GlobalAvgPool,
    Linear {
        in_dim: usize,
        out_dim: usize,
    },
    /// `relu(main(x) + shortcut(x))`; an empty shortcut is the identity.
    Residual {
        main: Vec<LayerSpec>,
        shortcut: Vec<LayerSpec>,
    },
}

/// A full network description: input shape plus layer stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("layer {index}: {msg}")]
    BadLayer { index: usize, msg: String },
    #[error("input shape {0:?} is invalid: {1}")]
    BadInput(Shape, String),
}

#[derive(Debug, Clone)]
enum BuiltOp {
    Conv {
        w_off: usize,
        b_off: usize,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        gamma_off: usize,
        beta_off: usize,
        stats_off: usize,
        channels: usize,
    },
    Relu,
    MaxPool2,
    GlobalAvgPool,
    Linear {
        w_off: usize,
        b_off: usize,
        in_dim: usize,
        out_dim: usize,
    },
    Residual {
        main: Vec<Built>,
        shortcut: Vec<Built>,
    },
}

#[derive(Debug, Clone)]
struct Built {
    op: BuiltOp,
    in_shape: Shape,
    out_shape: Shape,
}

/// Whether batch-norm layers use batch statistics (updating the running
/// estimates) or the frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Saved per-layer data for one batch, popped in reverse by backward.
enum Saved {
    Conv {
        input: Vec<f32>,
    },
    BatchNorm {
        input: Vec<f32>,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Relu {
        input: Vec<f32>,
    },
    MaxPool2 {
        argmax: Vec<u32>,
    },
    GlobalAvgPool,
    Linear {
        input: Vec<f32>,
    },
    ResidualAdd {
        pre_relu: Vec<f32>,
    },
}

/// Batch autodiff tape; opaque, obtained from [`Network::new_tape`].
#[derive(Default)]
pub struct Tape {
    entries: Vec<Saved>,
    batch: usize,
}

/// A compiled network: validated shapes plus parameter/statistic offsets.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetSpec,
    built: Vec<Built>,
    param_len: usize,
    stats_len: usize,
    output_dim: usize,
}

fn build_stack(
    specs: &[LayerSpec],
    mut shape: Shape,
    next_off: &mut usize,
    next_stat: &mut usize,
) -> Result<(Vec<Built>, Shape), NetError> {
    let mut built = Vec::with_capacity(specs.len());
    for (index, spec) in specs.iter().enumerate() {
        let bad = |msg: String| NetError::BadLayer { index, msg };
        let in_shape = shape;
        let op = match spec {
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                if *in_ch != shape.0 {
                    return Err(bad(format!(
                        "conv expects {in_ch} input channels, activation has {}",
                        shape.0
                    )));
                }
                if *kernel == 0 || *stride == 0 || *out_ch == 0 {
                    return Err(bad("kernel, stride, channels must be positive".into()));
                }
                if shape.1 + 2 * pad < *kernel || shape.2 + 2 * pad < *kernel {
                    return Err(bad("kernel larger than padded input".into()));
                }
                let w_off = *next_off;
                *next_off += out_ch * in_ch * kernel * kernel;
                let b_off = *next_off;
                *next_off += out_ch;
                shape = (
                    *out_ch,
                    conv_out_dim(shape.1, *kernel, *stride, *pad),
                    conv_out_dim(shape.2, *kernel, *stride, *pad),
                );
                BuiltOp::Conv {
                    w_off,
                    b_off,
                    in_ch: *in_ch,
                    out_ch: *out_ch,
                    kernel: *kernel,
                    stride: *stride,
                    pad: *pad,
                }
            }
            LayerSpec::BatchNorm { channels } => {
                if *channels != shape.0 {
                    return Err(bad(format!(
                        "batchnorm expects {channels} channels, activation has {}",
                        shape.0
                    )));
                }
                let gamma_off = *next_off;
                *next_off += channels;
                let beta_off = *next_off;
                *next_off += channels;
                let stats_off = *next_stat;
                *next_stat += 2 * channels; // running mean + running var
                BuiltOp::BatchNorm {
                    gamma_off,
                    beta_off,
                    stats_off,
                    channels: *channels,
                }
            }
            LayerSpec::Relu => BuiltOp::Relu,
            LayerSpec::MaxPool2 => {
                if shape.1 % 2 != 0 || shape.2 % 2 != 0 {
                    return Err(bad(format!(
                        "maxpool2 needs even spatial dims, got {}x{}",
                        shape.1, shape.2
                    )));
                }
                shape = (shape.0, shape.1 / 2, shape.2 / 2);
                BuiltOp::MaxPool2
            }
            LayerSpec::GlobalAvgPool => {
                shape = (shape.0, 1, 1);
                BuiltOp::GlobalAvgPool
            }
            LayerSpec::Linear { in_dim, out_dim } => {
                if *in_dim != shape_len(shape) {
                    return Err(bad(format!(
                        "linear expects {in_dim} inputs, activation has {}",
                        shape_len(shape)
                    )));
                }
                if *out_dim == 0 {
                    return Err(bad("linear output must be positive".into()));
                }
                let w_off = *next_off;
                *next_off += out_dim * in_dim;
                let b_off = *next_off;
                *next_off += out_dim;
                shape = (*out_dim, 1, 1);
                BuiltOp::Linear {
                    w_off,
                    b_off,
                    in_dim: *in_dim,
                    out_dim: *out_dim,
                }
            }
            LayerSpec::Residual { main, shortcut } => {
                let (main_built, main_shape) = build_stack(main, shape, next_off, next_stat)?;
                let (short_built, short_shape) =
                    build_stack(shortcut, shape, next_off, next_stat)?;
                if main_shape != short_shape {
                    return Err(bad(format!(
                        "residual branches disagree: main {main_shape:?}, shortcut {short_shape:?}"
                    )));
                }
                shape = main_shape;
                BuiltOp::Residual {
                    main: main_built,
                    shortcut: short_built,
                }
            }
        };
        built.push(Built {
            op,
            in_shape,
            out_shape: shape,
        });
    }
    Ok((built, shape))
}

impl Network {
    pub fn build(spec: NetSpec) -> Result<Network, NetError> {
        if shape_len(spec.input) == 0 {
            return Err(NetError::BadInput(spec.input, "empty input".into()));
        }
        let mut next_off = 0;
        let mut next_stat = 0;
        let (built, out_shape) =
            build_stack(&spec.layers, spec.input, &mut next_off, &mut next_stat)?;
        if out_shape.1 != 1 || out_shape.2 != 1 {
            return Err(NetError::BadInput(
                out_shape,
                "network must end in a vector output (got spatial activation)".into(),
            ));
        }
        Ok(Network {
            spec,
            built,
            param_len: next_off,
            stats_len: next_stat,
            output_dim: out_shape.0,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn param_len(&self) -> usize {
        self.param_len
    }

    pub fn stats_len(&self) -> usize {
        self.stats_len
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn input_len(&self) -> usize {
        shape_len(self.spec.input)
    }

    /// Seeded Kaiming-normal initialization, drawn in traversal order.
    pub fn init_params(&self, seed: u64) -> Vec<f32> {
        let mut params = vec![0.0f32; self.param_len];
        let mut rng = stream(seed, tags::INIT);
        init_stack(&self.built, &mut params, &mut rng);
        params
    }

    /// Fresh running statistics: mean 0, variance 1.
    pub fn init_stats(&self) -> Vec<f32> {
        let mut stats = vec![0.0f32; self.stats_len];
        init_stats_stack(&self.built, &mut stats);
        stats
    }

    pub fn new_tape(&self) -> Tape {
        Tape::default()
    }

    /// Forward a batch, returning logits as a `batch x output_dim` buffer.
    ///
    /// In `Train` mode batch-norm layers use batch statistics and update the
    /// running estimates in `stats`; in `Eval` mode they read `stats` only.
    /// When `tape` is given, the pass saves what [`Network::backward_batch`]
    /// needs.
    pub fn forward_batch(
        &self,
        params: &[f32],
        stats: &mut [f32],
        mode: Mode,
        inputs: &[&[f32]],
        tape: Option<&mut Tape>,
        exec: ExecMode,
    ) -> Vec<f32> {
        debug_assert_eq!(params.len(), self.param_len);
        debug_assert_eq!(stats.len(), self.stats_len);
        let n = inputs.len();
        let in_len = self.input_len();
        let mut x = vec![0.0f32; n * in_len];
        for (i, img) in inputs.iter().enumerate() {
            debug_assert_eq!(img.len(), in_len);
            x[i * in_len..(i + 1) * in_len].copy_from_slice(img);
        }
        match tape {
            Some(tape) => {
                tape.entries.clear();
                tape.batch = n;
                forward_stack::<true>(
                    &self.built,
                    params,
                    stats,
                    mode,
                    n,
                    x,
                    &mut tape.entries,
                    exec,
                )
            }
            None => {
                let mut unused = Vec::new();
                forward_stack::<false>(&self.built, params, stats, mode, n, x, &mut unused, exec)
            }
        }
    }

    /// Backward a batch from `d_logits` (`batch x output_dim`), accumulating
    /// parameter gradients into `grads` (`+=` semantics). Consumes the tape
    /// from the forward pass. Returns the stacked input gradients when
    /// requested.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_batch(
        &self,
        params: &[f32],
        tape: &mut Tape,
        mode: Mode,
        d_logits: Vec<f32>,
        grads: Option<&mut [f32]>,
        need_input_grad: bool,
        exec: ExecMode,
    ) -> Option<Vec<f32>> {
        let n = tape.batch;
        debug_assert_eq!(d_logits.len(), n * self.output_dim);
        let mut sink = GradSink { grads };
        let dx = backward_stack(
            &self.built,
            params,
            &mut tape.entries,
            mode,
            n,
            d_logits,
            &mut sink,
            need_input_grad,
            exec,
        );
        debug_assert!(tape.entries.is_empty(), "tape fully consumed");
        if need_input_grad {
            Some(dx)
        } else {
            None
        }
    }
}

struct GradSink<'a> {
    grads: Option<&'a mut [f32]>,
}

impl GradSink<'_> {
    fn add(&mut self, off: usize, values: &[f32]) {
        if let Some(g) = self.grads.as_deref_mut() {
            for (dst, v) in g[off..off + values.len()].iter_mut().zip(values) {
                *dst += v;
            }
        }
    }

    fn wants(&self) -> bool {
        self.grads.is_some()
    }

    fn slice(&mut self, off: usize, len: usize) -> Option<&mut [f32]> {
        self.grads.as_deref_mut().map(|g| &mut g[off..off + len])
    }
}

fn init_stack(built: &[Built], params: &mut [f32], rng: &mut rand_chacha::ChaCha8Rng) {
    for layer in built {
        match &layer.op {
            BuiltOp::Conv {
                w_off,
                b_off,
                in_ch,
                out_ch,
                kernel,
                ..
            } => {
                let fan_in = in_ch * kernel * kernel;
                let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).unwrap();
                for v in &mut params[*w_off..w_off + out_ch * fan_in] {
                    *v = normal.sample(rng);
                }
                params[*b_off..b_off + out_ch].fill(0.0);
            }
            BuiltOp::BatchNorm {
                gamma_off,
                beta_off,
                channels,
                ..
            } => {
                params[*gamma_off..gamma_off + channels].fill(1.0);
                params[*beta_off..beta_off + channels].fill(0.0);
            }
            BuiltOp::Linear {
                w_off,
                b_off,
                in_dim,
                out_dim,
            } => {
                // Gain-1 init keeps initial logits small.
                let normal = Normal::new(0.0f32, (1.0 / *in_dim as f32).sqrt()).unwrap();
                for v in &mut params[*w_off..w_off + out_dim * in_dim] {
                    *v = normal.sample(rng);
                }
                params[*b_off..b_off + out_dim].fill(0.0);
            }
            BuiltOp::Residual { main, shortcut } => {
                init_stack(main, params, rng);
                init_stack(shortcut, params, rng);
            }
            BuiltOp::Relu | BuiltOp::MaxPool2 | BuiltOp::GlobalAvgPool => {}
        }
    }
}

fn init_stats_stack(built: &[Built], stats: &mut [f32]) {
    for layer in built {
        match &layer.op {
            BuiltOp::BatchNorm {
                stats_off,
                channels,
                ..
            } => {
                stats[*stats_off..stats_off + channels].fill(0.0); // mean
                stats[stats_off + channels..stats_off + 2 * channels].fill(1.0); // var
            }
            BuiltOp::Residual { main, shortcut } => {
                init_stats_stack(main, stats);
                init_stats_stack(shortcut, stats);
            }
            _ => {}
        }
    }
}

/// Per-channel batch mean/var over `n` samples with plane `h*w`, reduced in
/// fixed chunk order.
fn batch_moments(
    x: &[f32],
    n: usize,
    ch: usize,
    plane: usize,
    exec: ExecMode,
) -> (Vec<f32>, Vec<f32>) {
    let feat = ch * plane;
    let partials = map_chunks(exec, n, SAMPLE_CHUNK, |range| {
        let mut sum = vec![0.0f64; ch];
        let mut sumsq = vec![0.0f64; ch];
        for i in range {
            let sample = &x[i * feat..(i + 1) * feat];
            for c in 0..ch {
                let mut s = 0.0f64;
                let mut s2 = 0.0f64;
                for &v in &sample[c * plane..(c + 1) * plane] {
                    s += v as f64;
                    s2 += (v as f64) * (v as f64);
                }
                sum[c] += s;
                sumsq[c] += s2;
            }
        }
        (sum, sumsq)
    });
    let count = (n * plane) as f64;
    let mut sum = vec![0.0f64; ch];
    let mut sumsq = vec![0.0f64; ch];
    for (s, s2) in &partials {
        for c in 0..ch {
            sum[c] += s[c];
            sumsq[c] += s2[c];
        }
    }
    let mut mean = vec![0.0f32; ch];
    let mut var = vec![0.0f32; ch];
    for c in 0..ch {
        let m = sum[c] / count;
        mean[c] = m as f32;
        var[c] = ((sumsq[c] / count) - m * m).max(0.0) as f32;
    }
    (mean, var)
}

#[allow(clippy::too_many_arguments)]
fn forward_stack<const SAVE: bool>(
    built: &[Built],
    params: &[f32],
    stats: &mut [f32],
    mode: Mode,
    n: usize,
    mut x: Vec<f32>,
    tape: &mut Vec<Saved>,
    exec: ExecMode,
) -> Vec<f32> {
    for layer in built {
        let (ch, h, w) = layer.in_shape;
        let in_feat = ch * h * w;
        let (och, oh, ow) = layer.out_shape;
        let out_feat = och * oh * ow;
        x = match &layer.op {
            BuiltOp::Conv {
                w_off,
                b_off,
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                let k_dim = in_ch * kernel * kernel;
                let weights = &params[*w_off..w_off + out_ch * k_dim];
                let x_ref = &x;
                let chunks = map_chunks(exec, n, SAMPLE_CHUNK, |range| {
                    let mut out = vec![0.0f32; range.len() * out_feat];
                    let mut cols = vec![0.0f32; k_dim * oh * ow];
                    for (j, i) in range.enumerate() {
                        let sample = &x_ref[i * in_feat..(i + 1) * in_feat];
                        im2col(sample, *in_ch, h, w, *kernel, *stride, *pad, &mut cols);
                        let dst = &mut out[j * out_feat..(j + 1) * out_feat];
                        gemm_nn(*out_ch, k_dim, oh * ow, 1.0, weights, &cols, 0.0, dst);
                        for oc in 0..*out_ch {
                            let b = params[b_off + oc];
                            for v in &mut dst[oc * oh * ow..(oc + 1) * oh * ow] {
                                *v += b;
                            }
                        }
                    }
                    out
                });
                let out: Vec<f32> = chunks.into_iter().flatten().collect();
                if SAVE {
                    tape.push(Saved::Conv { input: x });
                }
                out
            }
            BuiltOp::BatchNorm {
                gamma_off,
                beta_off,
                stats_off,
                channels,
            } => {
                let plane = h * w;
                let (mean, var) = match mode {
                    Mode::Train => {
                        let (mean, var) = batch_moments(&x, n, *channels, plane, exec);
                        for c in 0..*channels {
                            let rm = &mut stats[stats_off + c];
                            *rm += BATCHNORM_MOMENTUM * (mean[c] - *rm);
                            let rv = &mut stats[stats_off + channels + c];
                            *rv += BATCHNORM_MOMENTUM * (var[c] - *rv);
                        }
                        (mean, var)
                    }
                    Mode::Eval => (
                        stats[*stats_off..stats_off + channels].to_vec(),
                        stats[stats_off + channels..stats_off + 2 * channels].to_vec(),
                    ),
                };
                let inv_std: Vec<f32> = var
                    .iter()
                    .map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt())
                    .collect();
                let gamma = &params[*gamma_off..gamma_off + channels];
                let beta = &params[*beta_off..beta_off + channels];
                let x_ref = &x;
                let mean_ref = &mean;
                let inv_ref = &inv_std;
                let chunks = map_chunks(exec, n, SAMPLE_CHUNK, |range| {
                    let mut out = vec![0.0f32; range.len() * in_feat];
                    for (j, i) in range.enumerate() {
                        let sample = &x_ref[i * in_feat..(i + 1) * in_feat];
                        let dst = &mut out[j * in_feat..(j + 1) * in_feat];
                        for c in 0..*channels {
                            let scale = gamma[c] * inv_ref[c];
                            let shift = beta[c] - mean_ref[c] * scale;
                            for (d, &v) in dst[c * plane..(c + 1) * plane]
                                .iter_mut()
                                .zip(&sample[c * plane..(c + 1) * plane])
                            {
                                *d = v * scale + shift;
                            }
                        }
                    }
                    out
                });
                let out: Vec<f32> = chunks.into_iter().flatten().collect();
                if SAVE {
                    tape.push(Saved::BatchNorm {
                        input: x,
                        mean,
                        inv_std,
                    });
                }
                out
            }
            BuiltOp::Relu => {
                let mut out = x.clone();
                for v in &mut out {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                if SAVE {
                    tape.push(Saved::Relu { input: x });
                }
                out
            }
            BuiltOp::MaxPool2 => {
                let x_ref = &x;
                let chunks = map_chunks(exec, n, SAMPLE_CHUNK, |range| {
                    let mut out = vec![0.0f32; range.len() * out_feat];
                    let mut argmax = vec![0u32; range.len() * out_feat];
                    for (j, i) in range.enumerate() {
                        let sample = &x_ref[i * in_feat..(i + 1) * in_feat];
                        maxpool2(
                            sample,
                            ch,
                            h,
                            w,
                            &mut out[j * out_feat..(j + 1) * out_feat],
                            &mut argmax[j * out_feat..(j + 1) * out_feat],
                        );
                    }
                    (out, argmax)
                });
                let mut out = Vec::with_capacity(n * out_feat);
                let mut argmax = Vec::with_capacity(n * out_feat);
                for (o, a) in chunks {
                    out.extend(o);
                    argmax.extend(a);
                }
                if SAVE {
                    tape.push(Saved::MaxPool2 { argmax });
                }
                out
            }
            BuiltOp::GlobalAvgPool => {
                let plane = h * w;
                let mut out = vec![0.0f32; n * ch];
                for i in 0..n {
                    let sample = &x[i * in_feat..(i + 1) * in_feat];
                    for c in 0..ch {
                        out[i * ch + c] =
                            sample[c * plane..(c + 1) * plane].iter().sum::<f32>() / plane as f32;
                    }
                }
                if SAVE {
                    tape.push(Saved::GlobalAvgPool);
                }
                out
            }
            BuiltOp::Linear {
                w_off,
                b_off,
                in_dim,
                out_dim,
            } => {
                let weights = &params[*w_off..w_off + out_dim * in_dim];
                // out[n x out_dim] = x[n x in_dim] @ W^T
                let mut out = vec![0.0f32; n * out_dim];
                gemm_nt(n, *in_dim, *out_dim, 1.0, &x, weights, 0.0, &mut out);
                for row in out.chunks_exact_mut(*out_dim) {
                    for (v, b) in row.iter_mut().zip(&params[*b_off..b_off + out_dim]) {
                        *v += b;
                    }
                }
                if SAVE {
                    tape.push(Saved::Linear { input: x });
                }
                out
            }
            BuiltOp::Residual { main, shortcut } => {
                let shortcut_out = if shortcut.is_empty() {
                    x.clone()
                } else {
                    forward_stack::<SAVE>(shortcut, params, stats, mode, n, x.clone(), tape, exec)
                };
                let main_out = forward_stack::<SAVE>(main, params, stats, mode, n, x, tape, exec);
                let mut pre_relu = main_out;
                for (dst, v) in pre_relu.iter_mut().zip(&shortcut_out) {
                    *dst += v;
                }
                let mut out = pre_relu.clone();
                for v in &mut out {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                if SAVE {
                    tape.push(Saved::ResidualAdd { pre_relu });
                }
                out
            }
        };
    }
    x
}

#[allow(clippy::too_many_arguments)]
fn backward_stack(
    built: &[Built],
    params: &[f32],
    tape: &mut Vec<Saved>,
    mode: Mode,
    n: usize,
    mut dy: Vec<f32>,
    sink: &mut GradSink,
    need_input_grad: bool,
    exec: ExecMode,
) -> Vec<f32> {
    for (pos, layer) in built.iter().enumerate().rev() {
        let need_dx = need_input_grad || pos > 0;
        let (ch, h, w) = layer.in_shape;
        let in_feat = ch * h * w;
        let (och, oh, ow) = layer.out_shape;
        let out_feat = och * oh * ow;
        dy = match &layer.op {
            BuiltOp::Conv {
                w_off,
                b_off,
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                let Some(Saved::Conv { input }) = tape.pop() else {
                    unreachable!("tape out of sync at conv");
                };
                let k_dim = in_ch * kernel * kernel;
                let weights = &params[*w_off..w_off + out_ch * k_dim];
                let wants_grads = sink.wants();
                let dy_ref = &dy;
                let input_ref = &input;
                let chunks = map_chunks(exec, n, SAMPLE_CHUNK, |range| {
                    let mut dw = if wants_grads {
                        vec![0.0f32; out_ch * k_dim]
                    } else {
                        Vec::new()
                    };
                    let mut db = if wants_grads {
                        vec![0.0f32; *out_ch]
                    } else {
                        Vec::new()
                    };
                    let mut dx = if need_dx {
                        vec![0.0f32; range.len() * in_feat]
                    } else {
                        Vec::new()
                    };
                    let mut cols = vec![0.0f32; k_dim * oh * ow];
                    let mut d_cols = vec![0.0f32; k_dim * oh * ow];
                    for (j, i) in range.enumerate() {
                        let dy_s = &dy_ref[i * out_feat..(i + 1) * out_feat];
                        if wants_grads {
                            let sample = &input_ref[i * in_feat..(i + 1) * in_feat];
                            im2col(sample, *in_ch, h, w, *kernel, *stride, *pad, &mut cols);
                            gemm_nt(*out_ch, oh * ow, k_dim, 1.0, dy_s, &cols, 1.0, &mut dw);
                            for oc in 0..*out_ch {
                                db[oc] +=
                                    dy_s[oc * oh * ow..(oc + 1) * oh * ow].iter().sum::<f32>();
                            }
                        }
                        if need_dx {
                            gemm_tn(k_dim, *out_ch, oh * ow, 1.0, weights, dy_s, 0.0, &mut d_cols);
                            col2im(
                                &d_cols,
                                *in_ch,
                                h,
                                w,
                                *kernel,
                                *stride,
                                *pad,
                                &mut dx[j * in_feat..(j + 1) * in_feat],
                            );
                        }
                    }
                    (dw, db, dx)
                });
                if wants_grads {
                    let mut dw_total = vec![0.0f32; out_ch * k_dim];
                    let mut db_total = vec![0.0f32; *out_ch];
                    for (dw, db, _) in &chunks {
                        for (t, v) in dw_total.iter_mut().zip(dw) {
                            *t += v;
                        }
                        for (t, v) in db_total.iter_mut().zip(db) {
                            *t += v;
                        }
                    }
                    sink.add(*w_off, &dw_total);
                    sink.add(*b_off, &db_total);
                }
                if need_dx {
                    let mut dx_all = Vec::with_capacity(n * in_feat);
                    for (_, _, dx) in chunks {
                        dx_all.extend(dx);
                    }
                    dx_all
                } else {
                    Vec::new()
                }
            }
            BuiltOp::BatchNorm {
                gamma_off,
                beta_off,
                channels,
                ..
            } => {
                let Some(Saved::BatchNorm {
                    input,
                    mean,
                    inv_std,
                }) = tape.pop()
                else {
                    unreachable!("tape out of sync at batchnorm");
                };
                let plane = h * w;
                let gamma = &params[*gamma_off..gamma_off + channels];
                let dy_ref = &dy;
                let input_ref = &input;
                let mean_ref = &mean;
                let inv_ref = &inv_std;
                let partials = map_chunks(exec, n, SAMPLE_CHUNK, |range| {
                    let mut sum_dy = vec![0.0f64; *channels];
                    let mut sum_dy_xh = vec![0.0f64; *channels];
                    for i in range {
                        let dy_s = &dy_ref[i * in_feat..(i + 1) * in_feat];
                        let x_s = &input_ref[i * in_feat..(i + 1) * in_feat];
                        for c in 0..*channels {
                            let mut s = 0.0f64;
                            let mut sxh = 0.0f64;
                            for (d, v) in dy_s[c * plane..(c + 1) * plane]
                                .iter()
                                .zip(&x_s[c * plane..(c + 1) * plane])
                            {
                                let xh = (v - mean_ref[c]) * inv_ref[c];
                                s += *d as f64;
                                sxh += (*d as f64) * (xh as f64);
                            }
                            sum_dy[c] += s;
                            sum_dy_xh[c] += sxh;
                        }
                    }
                    (sum_dy, sum_dy_xh)
                });
                let mut sum_dy = vec![0.0f64; *channels];
                let mut sum_dy_xh = vec![0.0f64; *channels];
                for (a, b) in &partials {
                    for c in 0..*channels {
                        sum_dy[c] += a[c];
                        sum_dy_xh[c] += b[c];
                    }
                }
                if sink.wants() {
                    let d_gamma: Vec<f32> = sum_dy_xh.iter().map(|v| *v as f32).collect();
                    let d_beta: Vec<f32> = sum_dy.iter().map(|v| *v as f32).collect();
                    sink.add(*gamma_off, &d_gamma);
                    sink.add(*beta_off, &d_beta);
                }
                if need_dx {
                    let count = (n * plane) as f64;
                    let mean_dy: Vec<f32> =
                        sum_dy.iter().map(|v| (*v / count) as f32).collect();
                    let mean_dy_xh: Vec<f32> =
                        sum_dy_xh.iter().map(|v| (*v / count) as f32).collect();
                    let chunks = map_chunks(exec, n, SAMPLE_CHUNK, |range| {
                        let mut dx = vec![0.0f32; range.len() * in_feat];
                        for (j, i) in range.enumerate() {
                            let dy_s = &dy_ref[i * in_feat..(i + 1) * in_feat];
                            let x_s = &input_ref[i * in_feat..(i + 1) * in_feat];
                            let dx_s = &mut dx[j * in_feat..(j + 1) * in_feat];
                            for c in 0..*channels {
                                let g = gamma[c] * inv_ref[c];
                                match mode {
                                    Mode::Train => {
                                        for ((d, dyv), xv) in dx_s[c * plane..(c + 1) * plane]
                                            .iter_mut()
                                            .zip(&dy_s[c * plane..(c + 1) * plane])
                                            .zip(&x_s[c * plane..(c + 1) * plane])
                                        {
                                            let xh = (xv - mean_ref[c]) * inv_ref[c];
                                            *d = g * (dyv - mean_dy[c] - xh * mean_dy_xh[c]);
                                        }
                                    }
                                    // Eval-mode statistics are constants.
                                    Mode::Eval => {
                                        for (d, dyv) in dx_s[c * plane..(c + 1) * plane]
                                            .iter_mut()
                                            .zip(&dy_s[c * plane..(c + 1) * plane])
                                        {
                                            *d = g * dyv;
                                        }
                                    }
                                }
                            }
                        }
                        dx
                    });
                    chunks.into_iter().flatten().collect()
                } else {
                    Vec::new()
                }
            }
            BuiltOp::Relu => {
                let Some(Saved::Relu { input }) = tape.pop() else {
                    unreachable!("tape out of sync at relu");
                };
                let mut dx = dy;
                for (d, &v) in dx.iter_mut().zip(&input) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                dx
            }
            BuiltOp::MaxPool2 => {
                let Some(Saved::MaxPool2 { argmax }) = tape.pop() else {
                    unreachable!("tape out of sync at maxpool");
                };
                let mut dx = vec![0.0f32; n * in_feat];
                for i in 0..n {
                    let dy_s = &dy[i * out_feat..(i + 1) * out_feat];
                    let arg_s = &argmax[i * out_feat..(i + 1) * out_feat];
                    let dx_s = &mut dx[i * in_feat..(i + 1) * in_feat];
                    for (o, &src) in arg_s.iter().enumerate() {
                        dx_s[src as usize] += dy_s[o];
                    }
                }
                dx
            }
            BuiltOp::GlobalAvgPool => {
                let Some(Saved::GlobalAvgPool) = tape.pop() else {
                    unreachable!("tape out of sync at avgpool");
                };
                let plane = h * w;
                let mut dx = vec![0.0f32; n * in_feat];
                for i in 0..n {
                    for c in 0..ch {
                        let g = dy[i * ch + c] / plane as f32;
                        dx[i * in_feat + c * plane..i * in_feat + (c + 1) * plane].fill(g);
                    }
                }
                dx
            }
            BuiltOp::Linear {
                w_off,
                b_off,
                in_dim,
                out_dim,
            } => {
                let Some(Saved::Linear { input }) = tape.pop() else {
                    unreachable!("tape out of sync at linear");
                };
                if sink.wants() {
                    // dW = dY^T @ X  (out_dim x in_dim)
                    if let Some(dw) = sink.slice(*w_off, out_dim * in_dim) {
                        gemm_tn(*out_dim, n, *in_dim, 1.0, &dy, &input, 1.0, dw);
                    }
                    let mut db = vec![0.0f32; *out_dim];
                    for row in dy.chunks_exact(*out_dim) {
                        for (b, v) in db.iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                    sink.add(*b_off, &db);
                }
                if need_dx {
                    // dX = dY @ W  (n x in_dim)
                    let weights = &params[*w_off..w_off + out_dim * in_dim];
                    let mut dx = vec![0.0f32; n * in_dim];
                    gemm_nn(n, *out_dim, *in_dim, 1.0, &dy, weights, 0.0, &mut dx);
                    dx
                } else {
                    Vec::new()
                }
            }
            BuiltOp::Residual { main, shortcut } => {
                let Some(Saved::ResidualAdd { pre_relu }) = tape.pop() else {
                    unreachable!("tape out of sync at residual");
                };
                let mut d_sum = dy;
                for (d, &p) in d_sum.iter_mut().zip(&pre_relu) {
                    if p <= 0.0 {
                        *d = 0.0;
                    }
                }
                let d_main = backward_stack(
                    main,
                    params,
                    tape,
                    mode,
                    n,
                    d_sum.clone(),
                    sink,
                    need_dx,
                    exec,
                );
                if shortcut.is_empty() {
                    if need_dx {
                        let mut dm = d_main;
                        for (a, b) in dm.iter_mut().zip(&d_sum) {
                            *a += b;
                        }
                        dm
                    } else {
                        Vec::new()
                    }
                } else {
                    let d_short =
                        backward_stack(shortcut, params, tape, mode, n, d_sum, sink, need_dx, exec);
                    if need_dx {
                        let mut dm = d_main;
                        for (a, b) in dm.iter_mut().zip(&d_short) {
                            *a += b;
                        }
                        dm
                    } else {
                        Vec::new()
                    }
                }
            }
        };
    }
    dy
}

/// Stable softmax cross-entropy: returns the loss and writes `p - onehot`
/// into `d_logits`.
pub fn softmax_xent(logits: &[f32], label: usize, d_logits: &mut [f32]) -> f32 {
    debug_assert!(label < logits.len());
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0f32;
    for (d, &z) in d_logits.iter_mut().zip(logits) {
        let e = (z - max).exp();
        *d = e;
        sum += e;
    }
    for d in d_logits.iter_mut() {
        *d /= sum;
    }
    let loss = -(d_logits[label].max(f32::MIN_POSITIVE)).ln();
    d_logits[label] -= 1.0;
    loss
}

/// Argmax with ties broken toward the smaller index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// The 3-block reference CNN: each block is conv-norm-relu-pool with
/// 32/64/128 channels, followed by a linear head. Spatial dims must be
/// divisible by 8.
pub fn small_cnn(input: ImageShape, num_outputs: usize) -> NetSpec {
    let (c, h, w) = (input.channels, input.height, input.width);
    assert!(
        h % 8 == 0 && w % 8 == 0,
        "small_cnn needs spatial dims divisible by 8"
    );
    let widths = [32usize, 64, 128];
    let mut layers = Vec::new();
    let mut in_ch = c;
    for out_ch in widths {
        layers.push(LayerSpec::Conv {
            in_ch,
            out_ch,
            kernel: 3,
            stride: 1,
            pad: 1,
        });
        layers.push(LayerSpec::BatchNorm { channels: out_ch });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::MaxPool2);
        in_ch = out_ch;
    }
    layers.push(LayerSpec::Linear {
        in_dim: 128 * (h / 8) * (w / 8),
        out_dim: num_outputs,
    });
    NetSpec {
        input: (c, h, w),
        layers,
    }
}

fn basic_block(in_ch: usize, out_ch: usize, stride: usize) -> LayerSpec {
    let main = vec![
        LayerSpec::Conv {
            in_ch,
            out_ch,
            kernel: 3,
            stride,
            pad: 1,
        },
        LayerSpec::BatchNorm { channels: out_ch },
        LayerSpec::Relu,
        LayerSpec::Conv {
            in_ch: out_ch,
            out_ch,
            kernel: 3,
            stride: 1,
            pad: 1,
        },
        LayerSpec::BatchNorm { channels: out_ch },
    ];
    let shortcut = if stride != 1 || in_ch != out_ch {
        vec![
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel: 1,
                stride,
                pad: 0,
            },
            LayerSpec::BatchNorm { channels: out_ch },
        ]
    } else {
        Vec::new()
    };
    LayerSpec::Residual { main, shortcut }
}

/// ResNet-18 with the 3x3 stem used for small images.
pub fn resnet18(input: ImageShape, num_outputs: usize) -> NetSpec {
    let (c, h, w) = (input.channels, input.height, input.width);
    let mut layers = vec![
        LayerSpec::Conv {
            in_ch: c,
            out_ch: 64,
            kernel: 3,
            stride: 1,
            pad: 1,
        },
        LayerSpec::BatchNorm { channels: 64 },
        LayerSpec::Relu,
    ];
    let stages: [(usize, usize); 4] = [(64, 1), (128, 2), (256, 2), (512, 2)];
    let mut in_ch = 64;
    for (out_ch, first_stride) in stages {
        layers.push(basic_block(in_ch, out_ch, first_stride));
        layers.push(basic_block(out_ch, out_ch, 1));
        in_ch = out_ch;
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::Linear {
        in_dim: 512,
        out_dim: num_outputs,
    });
    NetSpec {
        input: (c, h, w),
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_inputs(net: &Network, n: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = stream(seed, 0xabc);
        (0..n)
            .map(|_| {
                (0..net.input_len())
                    .map(|_| rng.gen_range(-1.0..1.0f32))
                    .collect()
            })
            .collect()
    }

    /// Mean batch loss under the given mode; fresh stats per call so the
    /// running-average update does not leak between finite-difference probes.
    fn batch_loss(
        net: &Network,
        params: &[f32],
        inputs: &[&[f32]],
        labels: &[usize],
        mode: Mode,
    ) -> f32 {
        let mut stats = net.init_stats();
        let logits =
            net.forward_batch(params, &mut stats, mode, inputs, None, ExecMode::Sequential);
        let out = net.output_dim();
        let mut scratch = vec![0.0f32; out];
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            total += softmax_xent(&logits[i * out..(i + 1) * out], label, &mut scratch);
        }
        total / labels.len() as f32
    }

    fn analytic(
        net: &Network,
        params: &[f32],
        inputs: &[&[f32]],
        labels: &[usize],
        mode: Mode,
    ) -> (Vec<f32>, Vec<f32>) {
        let mut stats = net.init_stats();
        let mut tape = net.new_tape();
        let logits = net.forward_batch(
            params,
            &mut stats,
            mode,
            inputs,
            Some(&mut tape),
            ExecMode::Sequential,
        );
        let out = net.output_dim();
        let mut d_logits = vec![0.0f32; logits.len()];
        let inv = 1.0 / labels.len() as f32;
        for (i, &label) in labels.iter().enumerate() {
            let mut d = vec![0.0f32; out];
            softmax_xent(&logits[i * out..(i + 1) * out], label, &mut d);
            for (dst, v) in d_logits[i * out..(i + 1) * out].iter_mut().zip(&d) {
                *dst = v * inv;
            }
        }
        let mut grads = vec![0.0f32; net.param_len()];
        let d_input = net
            .backward_batch(
                params,
                &mut tape,
                mode,
                d_logits,
                Some(&mut grads),
                true,
                ExecMode::Sequential,
            )
            .unwrap();
        (grads, d_input)
    }

    /// Central-difference oracle over every parameter and input coordinate of
    /// a 3-sample batch loss. Smooth nets (no relu/pool) must agree
    /// everywhere; nets with kinks are probed at two step sizes and
    /// coordinates straddling a kink are skipped, with a cap on skips.
    fn check_gradients(spec: NetSpec, seed: u64, smooth: bool, mode: Mode) {
        let net = Network::build(spec).unwrap();
        let params = net.init_params(seed);
        let inputs_owned = random_inputs(&net, 3, seed);
        let inputs: Vec<&[f32]> = inputs_owned.iter().map(|v| v.as_slice()).collect();
        let labels = vec![1usize, 0, 1];
        let (grads, d_input) = analytic(&net, &params, &inputs, &labels, mode);

        let tol = |a: f32, b: f32| 2e-2 * (a.abs() + b.abs()) + 1e-3;
        let fd = |on_param: Option<usize>, on_input: Option<(usize, usize)>, eps: f32| -> f32 {
            let mut p = params.clone();
            let mut x = inputs_owned.clone();
            match (on_param, on_input) {
                (Some(i), None) => p[i] += eps,
                (None, Some((s, i))) => x[s][i] += eps,
                _ => unreachable!(),
            }
            let views: Vec<&[f32]> = x.iter().map(|v| v.as_slice()).collect();
            let up = batch_loss(&net, &p, &views, &labels, mode);
            let mut p2 = params.clone();
            let mut x2 = inputs_owned.clone();
            match (on_param, on_input) {
                (Some(i), None) => p2[i] -= eps,
                (None, Some((s, i))) => x2[s][i] -= eps,
                _ => unreachable!(),
            }
            let views2: Vec<&[f32]> = x2.iter().map(|v| v.as_slice()).collect();
            let down = batch_loss(&net, &p2, &views2, &labels, mode);
            (up - down) / (2.0 * eps)
        };

        let in_len = net.input_len();
        let total = net.param_len() + 3 * in_len;
        let mut skipped = 0usize;
        for i in 0..total {
            let (on_param, on_input, a) = if i < net.param_len() {
                (Some(i), None, grads[i])
            } else {
                let r = i - net.param_len();
                let (s, k) = (r / in_len, r % in_len);
                (None, Some((s, k)), d_input[s * in_len + k])
            };
            let numeric = fd(on_param, on_input, 1e-2);
            if !smooth {
                let numeric_small = fd(on_param, on_input, 2.5e-3);
                if (numeric - numeric_small).abs() > tol(numeric, numeric_small) {
                    skipped += 1;
                    continue;
                }
            }
            assert!(
                (a - numeric).abs() <= tol(a, numeric),
                "coordinate {i}: analytic {a} vs numeric {numeric}"
            );
        }
        assert!(skipped * 4 < total, "too many kink skips: {skipped}/{total}");
    }

    #[test]
    fn gradients_match_finite_differences_smooth_train_mode() {
        check_gradients(
            NetSpec {
                input: (2, 4, 4),
                layers: vec![
                    LayerSpec::Conv {
                        in_ch: 2,
                        out_ch: 4,
                        kernel: 3,
                        stride: 1,
                        pad: 1,
                    },
                    LayerSpec::BatchNorm { channels: 4 },
                    LayerSpec::Conv {
                        in_ch: 4,
                        out_ch: 3,
                        kernel: 3,
                        stride: 2,
                        pad: 1,
                    },
                    LayerSpec::GlobalAvgPool,
                    LayerSpec::Linear {
                        in_dim: 3,
                        out_dim: 3,
                    },
                ],
            },
            11,
            true,
            Mode::Train,
        );
    }

    #[test]
    fn gradients_match_finite_differences_smooth_eval_mode() {
        check_gradients(
            NetSpec {
                input: (2, 4, 4),
                layers: vec![
                    LayerSpec::Conv {
                        in_ch: 2,
                        out_ch: 4,
                        kernel: 3,
                        stride: 1,
                        pad: 1,
                    },
                    LayerSpec::BatchNorm { channels: 4 },
                    LayerSpec::GlobalAvgPool,
                    LayerSpec::Linear {
                        in_dim: 4,
                        out_dim: 3,
                    },
                ],
            },
            13,
            true,
            Mode::Eval,
        );
    }

    #[test]
    fn gradients_match_finite_differences_full_stack() {
        check_gradients(
            NetSpec {
                input: (2, 4, 4),
                layers: vec![
                    LayerSpec::Conv {
                        in_ch: 2,
                        out_ch: 4,
                        kernel: 3,
                        stride: 1,
                        pad: 1,
                    },
                    LayerSpec::BatchNorm { channels: 4 },
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2,
                    LayerSpec::Linear {
                        in_dim: 16,
                        out_dim: 3,
                    },
                ],
            },
            7,
            false,
            Mode::Train,
        );
    }

    #[test]
    fn gradients_match_finite_differences_residual_stack() {
        check_gradients(
            NetSpec {
                input: (2, 4, 4),
                layers: vec![
                    LayerSpec::Residual {
                        main: vec![
                            LayerSpec::Conv {
                                in_ch: 2,
                                out_ch: 3,
                                kernel: 3,
                                stride: 2,
                                pad: 1,
                            },
                            LayerSpec::BatchNorm { channels: 3 },
                            LayerSpec::Relu,
                            LayerSpec::Conv {
                                in_ch: 3,
                                out_ch: 3,
                                kernel: 3,
                                stride: 1,
                                pad: 1,
                            },
                            LayerSpec::BatchNorm { channels: 3 },
                        ],
                        shortcut: vec![
                            LayerSpec::Conv {
                                in_ch: 2,
                                out_ch: 3,
                                kernel: 1,
                                stride: 2,
                                pad: 0,
                            },
                            LayerSpec::BatchNorm { channels: 3 },
                        ],
                    },
                    LayerSpec::Residual {
                        main: vec![
                            LayerSpec::Conv {
                                in_ch: 3,
                                out_ch: 3,
                                kernel: 3,
                                stride: 1,
                                pad: 1,
                            },
                            LayerSpec::BatchNorm { channels: 3 },
                        ],
                        shortcut: vec![],
                    },
                    LayerSpec::GlobalAvgPool,
                    LayerSpec::Linear {
                        in_dim: 3,
                        out_dim: 2,
                    },
                ],
            },
            9,
            false,
            Mode::Train,
        );
    }

    #[test]
    fn eval_forward_is_pure_and_batch_independent() {
        let net = Network::build(small_cnn(
            crate::data::ImageShape {
                channels: 3,
                height: 16,
                width: 16,
            },
            6,
        ))
        .unwrap();
        let params = net.init_params(3);
        let mut stats = net.init_stats();
        let inputs_owned = random_inputs(&net, 4, 5);
        let inputs: Vec<&[f32]> = inputs_owned.iter().map(|v| v.as_slice()).collect();

        let full = net.forward_batch(
            &params,
            &mut stats,
            Mode::Eval,
            &inputs,
            None,
            ExecMode::Sequential,
        );
        // Same image alone or inside a different batch: identical logits.
        let single = net.forward_batch(
            &params,
            &mut stats,
            Mode::Eval,
            &inputs[2..3],
            None,
            ExecMode::Sequential,
        );
        let out = net.output_dim();
        assert_eq!(&full[2 * out..3 * out], &single[..]);
    }

    #[test]
    fn parallel_and_sequential_forward_agree_bitwise() {
        let net = Network::build(small_cnn(
            crate::data::ImageShape {
                channels: 3,
                height: 16,
                width: 16,
            },
            4,
        ))
        .unwrap();
        let params = net.init_params(1);
        let inputs_owned = random_inputs(&net, 19, 2);
        let inputs: Vec<&[f32]> = inputs_owned.iter().map(|v| v.as_slice()).collect();
        let mut stats_a = net.init_stats();
        let mut stats_b = net.init_stats();
        let a = net.forward_batch(
            &params,
            &mut stats_a,
            Mode::Train,
            &inputs,
            None,
            ExecMode::Sequential,
        );
        let b = net.forward_batch(
            &params,
            &mut stats_b,
            Mode::Train,
            &inputs,
            None,
            ExecMode::Parallel,
        );
        assert_eq!(a, b);
        assert_eq!(stats_a, stats_b);
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let net = Network::build(NetSpec {
            input: (2, 4, 4),
            layers: vec![
                LayerSpec::BatchNorm { channels: 2 },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Linear {
                    in_dim: 2,
                    out_dim: 2,
                },
            ],
        })
        .unwrap();
        let params = net.init_params(0);
        let mut stats = net.init_stats();
        let before = stats.clone();
        let inputs_owned = random_inputs(&net, 4, 9);
        let inputs: Vec<&[f32]> = inputs_owned.iter().map(|v| v.as_slice()).collect();
        net.forward_batch(
            &params,
            &mut stats,
            Mode::Train,
            &inputs,
            None,
            ExecMode::Sequential,
        );
        assert_ne!(before, stats);
        let frozen = stats.clone();
        net.forward_batch(
            &params,
            &mut stats,
            Mode::Eval,
            &inputs,
            None,
            ExecMode::Sequential,
        );
        assert_eq!(frozen, stats, "eval mode must not touch running stats");
    }

    #[test]
    fn init_is_seed_deterministic() {
        let net = Network::build(small_cnn(
            crate::data::ImageShape {
                channels: 3,
                height: 8,
                width: 8,
            },
            4,
        ))
        .unwrap();
        assert_eq!(net.init_params(1), net.init_params(1));
        assert_ne!(net.init_params(1), net.init_params(2));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 1.0, 1.0, 0.2]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }

    #[test]
    fn build_rejects_mismatched_shapes() {
        let err = Network::build(NetSpec {
            input: (3, 8, 8),
            layers: vec![LayerSpec::Conv {
                in_ch: 4,
                out_ch: 8,
                kernel: 3,
                stride: 1,
                pad: 1,
            }],
        });
        assert!(err.is_err());
    }

    #[test]
    fn resnet18_builds_for_cifar_shapes() {
        let net = Network::build(resnet18(
            crate::data::ImageShape {
                channels: 3,
                height: 32,
                width: 32,
            },
            20,
        ))
        .unwrap();
        assert_eq!(net.output_dim(), 20);
        // 11M-ish parameters for the classic configuration.
        assert!(net.param_len() > 10_000_000 && net.param_len() < 12_000_000);
    }

    #[test]
    fn softmax_xent_gradient_sums_to_zero() {
        let logits = [0.3f32, -1.2, 2.0, 0.0];
        let mut d = [0.0f32; 4];
        let loss = softmax_xent(&logits, 2, &mut d);
        assert!(loss > 0.0);
        assert!(d.iter().sum::<f32>().abs() < 1e-6);
        assert!(d[2] < 0.0);
    }
}
