//! A small trainable dense-prediction network: a shared convolutional
//! encoder producing a fused feature map, K parallel expert branches that
//! each predict a depth map, and a gating head that predicts per-pixel
//! logits over the experts. Every layer uses same-padding (zero padded), so
//! spatial dimensions are preserved end to end.
//!
//! The backward pass is hand-derived. [`forward`] caches the activations a
//! backward pass needs; [`backward`] consumes upstream gradients with
//! respect to the per-expert depth maps and the gate logits and accumulates
//! exact parameter gradients into the store. Gradients are verified against
//! central finite differences in the tests and the acceptance suite.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::grid::{Grid, GridStack};
use crate::mixture::{GateField, MixtureOutput};
use crate::rng::stream;

/// Magic bytes of the checkpoint format.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDC1";

/// Default standard deviation of the per-expert initialization noise.
pub const EXPERT_INIT_SIGMA: f64 = 1e-3;

/// Amplitude of the uniform gate-bias perturbation at init.
pub const GATE_BIAS_INIT: f64 = 0.05;

/// Leaky rectifier slope for negative inputs; avoids dead units in a tiny
/// network.
const LEAKY_SLOPE: f64 = 0.01;

/// Network architecture parameters.
///
/// The mixture always sits at the final prediction stage (per-pixel experts
/// over the fused feature map). `full-head` and `pre-fusion` are recognized
/// names for alternative expert placements but are not implemented.
///
/// Total parameter count (same-padded `k`×`k` convolutions, `C` feature
/// channels, `I` input channels, `L` encoder layers, `K` experts):
///
/// ```text
/// encoder:  C*I*k^2 + C  +  (L-1) * (C^2*k^2 + C)
/// experts:  K * (C^2*k^2 + C + C*k^2 + 1)
/// gate:     K*C*k^2 + K
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub input_channels: usize,
    pub feature_channels: usize,
    pub num_experts: usize,
    pub kernel_size: usize,
    pub encoder_layers: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            feature_channels: 16,
            num_experts: 4,
            kernel_size: 3,
            encoder_layers: 2,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.input_channels > 0, || "input_channels must be positive".into())?;
        ensure(self.feature_channels > 0, || "feature_channels must be positive".into())?;
        ensure(self.num_experts >= 1, || "num_experts must be at least 1".into())?;
        ensure(self.kernel_size % 2 == 1 && self.kernel_size > 0, || {
            format!("kernel_size must be odd and positive, got {}", self.kernel_size)
        })?;
        ensure(self.encoder_layers >= 1, || "encoder_layers must be at least 1".into())
    }

    /// Closed-form parameter count (see the type-level docs).
    pub fn param_count(&self) -> usize {
        let (c, i, l, k2) = (
            self.feature_channels,
            self.input_channels,
            self.encoder_layers,
            self.kernel_size * self.kernel_size,
        );
        let encoder = c * i * k2 + c + (l - 1) * (c * c * k2 + c);
        let experts = self.num_experts * (c * c * k2 + c + c * k2 + 1);
        let gate = self.num_experts * c * k2 + self.num_experts;
        encoder + experts + gate
    }
}

/// Shape of one parameter segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentShape {
    /// Convolution weights laid out `[out][in][ky][kx]`.
    Conv {
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
    },
    /// Per-output-channel biases.
    Bias { channels: usize },
}

/// A named contiguous slice of the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: SegmentShape,
    /// Weight-decay eligibility; false exactly on bias entries.
    pub decay: bool,
}

/// Flat parameter vector, a parallel gradient vector, and the named segment
/// layout. A version counter ties forward traces to the parameter state they
/// were computed from.
#[derive(Debug, Clone)]
pub struct ParamStore {
    config: NetConfig,
    values: Vec<f64>,
    grads: Vec<f64>,
    segments: Vec<Segment>,
    frozen: Vec<bool>, // per segment
    version: u64,
}

fn segment_layout(config: &NetConfig) -> Vec<Segment> {
    let (c, k) = (config.feature_channels, config.num_experts);
    let kernel = config.kernel_size;
    let mut segments: Vec<Segment> = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: SegmentShape| {
        let len = match shape {
            SegmentShape::Conv {
                out_channels,
                in_channels,
                kernel,
            } => out_channels * in_channels * kernel * kernel,
            SegmentShape::Bias { channels } => channels,
        };
        segments.push(Segment {
            name,
            offset,
            len,
            shape,
            decay: matches!(shape, SegmentShape::Conv { .. }),
        });
        offset += len;
    };
    let conv = |out_channels: usize, in_channels: usize| SegmentShape::Conv {
        out_channels,
        in_channels,
        kernel,
    };
    for l in 0..config.encoder_layers {
        let in_c = if l == 0 { config.input_channels } else { c };
        push(format!("enc{l}.weight"), conv(c, in_c));
        push(format!("enc{l}.bias"), SegmentShape::Bias { channels: c });
    }
    for e in 0..k {
        push(format!("expert{e}.conv0.weight"), conv(c, c));
        push(format!("expert{e}.conv0.bias"), SegmentShape::Bias { channels: c });
        push(format!("expert{e}.conv1.weight"), conv(1, c));
        push(format!("expert{e}.conv1.bias"), SegmentShape::Bias { channels: 1 });
    }
    push("gate.weight".into(), conv(k, c));
    push("gate.bias".into(), SegmentShape::Bias { channels: k });
    segments
}

/// Adds i.i.d. `N(0, sigma_init^2)` noise to a copy of `base`, drawn from a
/// stream keyed by `(seed, expert_index)`. With `sigma_init = 0` the copy is
/// bit-identical to the base.
pub fn perturb_expert_values(base: &[f64], sigma_init: f64, seed: u64, expert_index: usize) -> Vec<f64> {
    if sigma_init == 0.0 {
        return base.to_vec();
    }
    let mut rng = stream(seed, &format!("init/expert-perturb/{expert_index}"));
    let normal = Normal::new(0.0, sigma_init).expect("sigma_init must be non-negative");
    base.iter().map(|&v| v + normal.sample(&mut rng)).collect()
}

impl ParamStore {
    /// Initializes parameters with the default expert perturbation
    /// ([`EXPERT_INIT_SIGMA`]).
    pub fn init(config: &NetConfig) -> Result<Self> {
        Self::init_with_sigma(config, EXPERT_INIT_SIGMA)
    }

    /// Initializes parameters.
    ///
    /// Encoder and gate convolutions draw fan-in-scaled uniform weights;
    /// biases start at zero except the gate's, which gets a small uniform
    /// perturbation: exactly-equal logits sit on the softmax's uniform
    /// saddle where the entropy regularizer has zero gradient, so routing
    /// could not differentiate (the same symmetry-breaking argument behind
    /// the expert perturbation). The expert branches share a single base
    /// weight draw (the stand-in for pretrained decoder weights) and each
    /// expert receives that base plus i.i.d. Gaussian noise of standard
    /// deviation `sigma_init` on both of its convolutions, so experts start
    /// close together but break symmetry.
    pub fn init_with_sigma(config: &NetConfig, sigma_init: f64) -> Result<Self> {
        config.validate()?;
        ensure(sigma_init >= 0.0, || "sigma_init must be non-negative".into())?;
        let segments = segment_layout(config);
        let total: usize = segments.iter().map(|s| s.len).sum();
        debug_assert_eq!(total, config.param_count());
        let mut values = vec![0.0; total];

        let (c, k2) = (config.feature_channels, config.kernel_size * config.kernel_size);
        let fan_in_uniform = |rng: &mut rand_chacha::ChaCha8Rng, fan_in: usize, out: &mut [f64]| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in out {
                *v = rng.random_range(-bound..bound);
            }
        };

        // Encoder and gate: independent fan-in-scaled draws, biases zero.
        for l in 0..config.encoder_layers {
            let in_c = if l == 0 { config.input_channels } else { c };
            let seg = find(&segments, &format!("enc{l}.weight"));
            let mut rng = stream(config.seed, &format!("init/encoder/{l}"));
            fan_in_uniform(&mut rng, in_c * k2, &mut values[seg.offset..seg.offset + seg.len]);
        }
        {
            let seg = find(&segments, "gate.weight");
            let mut rng = stream(config.seed, "init/gate");
            fan_in_uniform(&mut rng, c * k2, &mut values[seg.offset..seg.offset + seg.len]);
            let bias = find(&segments, "gate.bias");
            for v in &mut values[bias.offset..bias.offset + bias.len] {
                *v = rng.random_range(-GATE_BIAS_INIT..GATE_BIAS_INIT);
            }
        }

        // Experts: one base weight draw shared by all branches, then a
        // per-expert perturbation of both conv weights (biases stay zero).
        let mut base = vec![0.0; c * c * k2 + c * k2];
        {
            let mut rng = stream(config.seed, "init/expert-base");
            let (w0, w1) = base.split_at_mut(c * c * k2);
            fan_in_uniform(&mut rng, c * k2, w0);
            fan_in_uniform(&mut rng, c * k2, w1);
        }
        for e in 0..config.num_experts {
            let perturbed = perturb_expert_values(&base, sigma_init, config.seed, e);
            let seg0 = find(&segments, &format!("expert{e}.conv0.weight"));
            values[seg0.offset..seg0.offset + seg0.len].copy_from_slice(&perturbed[..c * c * k2]);
            let seg1 = find(&segments, &format!("expert{e}.conv1.weight"));
            values[seg1.offset..seg1.offset + seg1.len].copy_from_slice(&perturbed[c * c * k2..]);
        }

        let frozen = vec![false; segments.len()];
        Ok(Self {
            config: config.clone(),
            values,
            grads: vec![0.0; total],
            segments,
            frozen,
            version: 0,
        })
    }

    #[inline]
    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    #[inline]
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    #[inline]
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Per-entry weight-decay eligibility (false exactly on bias entries).
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.values.len()];
        for seg in &self.segments {
            if seg.decay {
                mask[seg.offset..seg.offset + seg.len].fill(true);
            }
        }
        mask
    }

    pub fn segment(&self, name: &str) -> &Segment {
        find(&self.segments, name)
    }

    pub fn segment_values(&self, name: &str) -> &[f64] {
        let seg = self.segment(name);
        &self.values[seg.offset..seg.offset + seg.len]
    }

    pub fn segment_grads(&self, name: &str) -> &[f64] {
        let seg = self.segment(name);
        &self.grads[seg.offset..seg.offset + seg.len]
    }

    /// Mutable parameter access; bumps the version so stale forward traces
    /// are rejected by [`backward`].
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.values
    }

    pub(crate) fn grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    pub fn zero_grads(&mut self) {
        self.grads.fill(0.0);
    }

    /// Marks all segments whose name starts with `prefix` as frozen; frozen
    /// segments are skipped entirely by the optimizer.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.name.starts_with(prefix) {
                self.frozen[i] = frozen;
            }
        }
    }

    pub fn segment_frozen(&self, index: usize) -> bool {
        self.frozen[index]
    }

    fn conv(&self, name: &str) -> (&[f64], &[f64]) {
        (
            self.segment_values(&format!("{name}.weight")),
            self.segment_values(&format!("{name}.bias")),
        )
    }

    /// Writes an `MDC1` checkpoint: magic, named integer config fields, then
    /// the flat parameter vector in layout order, all little-endian.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let fields: [(&str, i64); 6] = [
            ("input_channels", self.config.input_channels as i64),
            ("feature_channels", self.config.feature_channels as i64),
            ("num_experts", self.config.num_experts as i64),
            ("kernel_size", self.config.kernel_size as i64),
            ("encoder_layers", self.config.encoder_layers as i64),
            ("seed", self.config.seed as i64),
        ];
        let mut bytes = Vec::with_capacity(16 + self.values.len() * 8);
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&(fields.len() as u32).to_le_bytes());
        for (name, value) in fields {
            bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
            bytes.extend_from_slice(name.as_bytes());
            bytes.extend_from_slice(&value.to_le_bytes());
        }
        bytes.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for &v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint written by [`save_checkpoint`]; bit-exact inverse.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;

        if bytes.len() < 8 || &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "bad or missing MDC1 magic"));
        }
        let mut pos = 4;
        let field_count = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        let mut fields = std::collections::BTreeMap::new();
        for _ in 0..field_count {
            if pos + 2 > bytes.len() {
                return Err(Error::format(path, "truncated config block"));
            }
            let name_len = u16::from_le_bytes(bytes[pos..pos + 2].try_into().unwrap()) as usize;
            pos += 2;
            if pos + name_len + 8 > bytes.len() {
                return Err(Error::format(path, "truncated config field"));
            }
            let name = std::str::from_utf8(&bytes[pos..pos + name_len])
                .map_err(|_| Error::format(path, "config field name is not UTF-8"))?
                .to_string();
            pos += name_len;
            let value = i64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
            pos += 8;
            fields.insert(name, value);
        }
        let get = |name: &str| -> Result<i64> {
            fields
                .get(name)
                .copied()
                .ok_or_else(|| Error::format(path, format!("missing config field `{name}`")))
        };
        let config = NetConfig {
            input_channels: get("input_channels")? as usize,
            feature_channels: get("feature_channels")? as usize,
            num_experts: get("num_experts")? as usize,
            kernel_size: get("kernel_size")? as usize,
            encoder_layers: get("encoder_layers")? as usize,
            seed: get("seed")? as u64,
        };
        config.validate().map_err(|e| Error::format(path, e.to_string()))?;
        if pos + 8 > bytes.len() {
            return Err(Error::format(path, "missing parameter length"));
        }
        let param_len = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
        if param_len != config.param_count() {
            return Err(Error::format(
                path,
                format!(
                    "parameter count {param_len} does not match config ({})",
                    config.param_count()
                ),
            ));
        }
        if bytes.len() - pos != param_len * 8 {
            return Err(Error::format(
                path,
                format!("payload is {} bytes, expected {}", bytes.len() - pos, param_len * 8),
            ));
        }
        let values: Vec<f64> = bytes[pos..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let segments = segment_layout(&config);
        let frozen = vec![false; segments.len()];
        Ok(Self {
            grads: vec![0.0; values.len()],
            config,
            values,
            segments,
            frozen,
            version: 0,
        })
    }
}

fn find<'s>(segments: &'s [Segment], name: &str) -> &'s Segment {
    segments
        .iter()
        .find(|s| s.name == name)
        .unwrap_or_else(|| panic!("unknown parameter segment `{name}`"))
}

#[inline]
fn leaky(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

#[inline]
fn dleaky(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

fn apply_leaky(stack: &GridStack) -> GridStack {
    GridStack::new(
        stack
            .iter()
            .map(|g| {
                Grid::new(g.height(), g.width(), g.data().iter().map(|&z| leaky(z)).collect())
                    .expect("shape-preserving map")
            })
            .collect(),
    )
    .expect("shape-preserving stack")
}

// ---------------------------------------------------------------------------
// Same-padded convolution kernels.
//
// All loops are gather-style (each output element written by exactly one
// iteration), so parallelizing over channels is bit-deterministic. Inner
// loops run over contiguous row sub-slices to vectorize.
// ---------------------------------------------------------------------------

fn conv_forward(
    input: &GridStack,
    weights: &[f64],
    biases: &[f64],
    out_channels: usize,
    kernel: usize,
) -> GridStack {
    let (in_c, h, w) = (input.channels(), input.height(), input.width());
    let half = kernel / 2;
    debug_assert_eq!(weights.len(), out_channels * in_c * kernel * kernel);
    let grids: Vec<Grid> = (0..out_channels)
        .into_par_iter()
        .map(|oc| {
            let mut data = vec![biases[oc]; h * w];
            for ic in 0..in_c {
                let chan = input.channel(ic);
                for ky in 0..kernel {
                    for y in 0..h {
                        let iy = y + ky;
                        if iy < half || iy - half >= h {
                            continue;
                        }
                        let in_row = chan.row(iy - half);
                        let out_row = &mut data[y * w..(y + 1) * w];
                        for kx in 0..kernel {
                            let wgt = weights[((oc * in_c + ic) * kernel + ky) * kernel + kx];
                            let x0 = half.saturating_sub(kx);
                            let x1 = (w + half).saturating_sub(kx).min(w);
                            if x0 >= x1 {
                                continue;
                            }
                            let src = &in_row[x0 + kx - half..x1 + kx - half];
                            for (d, s) in out_row[x0..x1].iter_mut().zip(src) {
                                *d += wgt * s;
                            }
                        }
                    }
                }
            }
            Grid::new(h, w, data).expect("conv output shape")
        })
        .collect();
    GridStack::new(grids).expect("conv output stack")
}

/// Gradient with respect to the convolution input.
fn conv_backward_input(
    grad_out: &GridStack,
    weights: &[f64],
    in_channels: usize,
    kernel: usize,
) -> GridStack {
    let (out_c, h, w) = (grad_out.channels(), grad_out.height(), grad_out.width());
    let half = kernel / 2;
    let grids: Vec<Grid> = (0..in_channels)
        .into_par_iter()
        .map(|ic| {
            let mut data = vec![0.0; h * w];
            for oc in 0..out_c {
                let gchan = grad_out.channel(oc);
                for ky in 0..kernel {
                    for y in 0..h {
                        // Input row y fed output row y + half - ky.
                        let oy = y + half;
                        if oy < ky || oy - ky >= h {
                            continue;
                        }
                        let g_row = gchan.row(oy - ky);
                        let out_row = &mut data[y * w..(y + 1) * w];
                        for kx in 0..kernel {
                            let wgt = weights[((oc * in_channels + ic) * kernel + ky) * kernel + kx];
                            let x0 = kx.saturating_sub(half);
                            let x1 = (w + kx).saturating_sub(half).min(w);
                            if x0 >= x1 {
                                continue;
                            }
                            let src = &g_row[x0 + half - kx..x1 + half - kx];
                            for (d, s) in out_row[x0..x1].iter_mut().zip(src) {
                                *d += wgt * s;
                            }
                        }
                    }
                }
            }
            Grid::new(h, w, data).expect("conv input-grad shape")
        })
        .collect();
    GridStack::new(grids).expect("conv input-grad stack")
}

/// Accumulates weight and bias gradients (additively) for one convolution.
fn conv_backward_params(
    input: &GridStack,
    grad_out: &GridStack,
    kernel: usize,
    grad_weights: &mut [f64],
    grad_biases: &mut [f64],
) {
    let (in_c, h, w) = (input.channels(), input.height(), input.width());
    let half = kernel / 2;
    let per_oc = in_c * kernel * kernel;
    grad_weights
        .par_chunks_mut(per_oc)
        .zip(grad_biases.par_iter_mut())
        .enumerate()
        .for_each(|(oc, (w_chunk, bias))| {
            let gchan = grad_out.channel(oc);
            *bias += gchan.data().iter().sum::<f64>();
            for ic in 0..in_c {
                let chan = input.channel(ic);
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let x0 = half.saturating_sub(kx);
                        let x1 = (w + half).saturating_sub(kx).min(w);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for y in 0..h {
                            let iy = y + ky;
                            if iy < half || iy - half >= h {
                                continue;
                            }
                            let in_row = chan.row(iy - half);
                            let g_row = gchan.row(y);
                            let src = &in_row[x0 + kx - half..x1 + kx - half];
                            acc += g_row[x0..x1].iter().zip(src).map(|(g, s)| g * s).sum::<f64>();
                        }
                        w_chunk[(ic * kernel + ky) * kernel + kx] += acc;
                    }
                }
            }
        });
}

/// Cached activations of one forward pass plus the resulting mixture
/// output. Tied to the parameter version it was computed from.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: GridStack,
    encoder_pre: Vec<GridStack>,
    encoder_act: Vec<GridStack>,
    expert_pre: Vec<GridStack>,
    expert_act: Vec<GridStack>,
    output: MixtureOutput,
    version: u64,
}

impl ForwardTrace {
    #[inline]
    pub fn output(&self) -> &MixtureOutput {
        &self.output
    }

    /// Fused feature map (last encoder activation).
    pub fn features(&self) -> &GridStack {
        self.encoder_act.last().expect("encoder has at least one layer")
    }
}

/// Runs the network: encoder layers (conv + leaky rectifier), per-expert
/// depth heads (conv, leaky rectifier, conv to one channel), gate conv to K
/// logit channels, then the temperature-scaled softmax and soft fusion.
pub fn forward(params: &ParamStore, input: &GridStack, temperature: f64) -> Result<ForwardTrace> {
    let cfg = params.config();
    ensure(input.channels() == cfg.input_channels, || {
        format!(
            "input has {} channels, config expects {}",
            input.channels(),
            cfg.input_channels
        )
    })?;
    let k = cfg.kernel_size;
    let mut encoder_pre = Vec::with_capacity(cfg.encoder_layers);
    let mut encoder_act: Vec<GridStack> = Vec::with_capacity(cfg.encoder_layers);
    for l in 0..cfg.encoder_layers {
        let (wgt, bias) = params.conv(&format!("enc{l}"));
        let layer_input = if l == 0 { input } else { &encoder_act[l - 1] };
        let pre = conv_forward(layer_input, wgt, bias, cfg.feature_channels, k);
        let act = apply_leaky(&pre);
        encoder_pre.push(pre);
        encoder_act.push(act);
    }
    let features = encoder_act.last().unwrap();

    let mut expert_pre = Vec::with_capacity(cfg.num_experts);
    let mut expert_act = Vec::with_capacity(cfg.num_experts);
    let mut depth_channels = Vec::with_capacity(cfg.num_experts);
    for e in 0..cfg.num_experts {
        let (w0, b0) = params.conv(&format!("expert{e}.conv0"));
        let pre = conv_forward(features, w0, b0, cfg.feature_channels, k);
        let act = apply_leaky(&pre);
        let (w1, b1) = params.conv(&format!("expert{e}.conv1"));
        let out = conv_forward(&act, w1, b1, 1, k);
        expert_pre.push(pre);
        expert_act.push(act);
        depth_channels.push(out.channel(0).clone());
    }
    let expert_depths = GridStack::new(depth_channels)?;

    let (gw, gb) = params.conv("gate");
    let logits = conv_forward(features, gw, gb, cfg.num_experts, k);
    let gate = GateField::softmax(&logits, temperature)?;
    let output = MixtureOutput::new(expert_depths, gate)?;

    Ok(ForwardTrace {
        input: input.clone(),
        encoder_pre,
        encoder_act,
        expert_pre,
        expert_act,
        output,
        version: params.version(),
    })
}

/// Backpropagates upstream gradients through the network and accumulates
/// parameter gradients (additively) into `params.grads`.
///
/// `grad_experts` holds the loss gradient with respect to each expert's
/// depth map (K channels); `grad_logits` the gradient with respect to the
/// gate logits. The trace must have been produced by the current parameter
/// version.
pub fn backward(
    params: &mut ParamStore,
    trace: &ForwardTrace,
    grad_experts: &GridStack,
    grad_logits: &GridStack,
) -> Result<()> {
    ensure(trace.version == params.version(), || {
        "stale forward trace: parameters changed since the forward pass".into()
    })?;
    let cfg = params.config().clone();
    ensure(
        grad_experts.channels() == cfg.num_experts && grad_logits.channels() == cfg.num_experts,
        || "upstream gradient channel count does not match the expert count".into(),
    )?;
    let k = cfg.kernel_size;
    let features = trace.features().clone();
    let (h, w) = (features.height(), features.width());
    ensure(grad_experts.height() == h && grad_experts.width() == w, || {
        "upstream gradient dimensions do not match the trace".into()
    })?;

    let mut grad_features = GridStack::zeros(cfg.feature_channels, h, w);

    // Gate head.
    conv_params_into(params, "gate", &features, grad_logits, k);
    accumulate(
        &mut grad_features,
        &conv_backward_input(grad_logits, params.segment_values("gate.weight"), cfg.feature_channels, k),
    );

    // Expert branches.
    for e in 0..cfg.num_experts {
        let g_out = GridStack::from_grid(grad_experts.channel(e).clone());
        let act = &trace.expert_act[e];
        let pre = &trace.expert_pre[e];

        let name1 = format!("expert{e}.conv1");
        conv_params_into(params, &name1, act, &g_out, k);
        let g_act = conv_backward_input(
            &g_out,
            params.segment_values(&format!("{name1}.weight")),
            cfg.feature_channels,
            k,
        );
        let g_pre = mul_dleaky(&g_act, pre);

        let name0 = format!("expert{e}.conv0");
        conv_params_into(params, &name0, &features, &g_pre, k);
        accumulate(
            &mut grad_features,
            &conv_backward_input(
                &g_pre,
                params.segment_values(&format!("{name0}.weight")),
                cfg.feature_channels,
                k,
            ),
        );
    }

    // Encoder, deepest layer first.
    let mut g_act = grad_features;
    for l in (0..cfg.encoder_layers).rev() {
        let g_pre = mul_dleaky(&g_act, &trace.encoder_pre[l]);
        let layer_input = if l == 0 { &trace.input } else { &trace.encoder_act[l - 1] };
        let name = format!("enc{l}");
        conv_params_into(params, &name, layer_input, &g_pre, k);
        if l > 0 {
            g_act = conv_backward_input(
                &g_pre,
                params.segment_values(&format!("{name}.weight")),
                cfg.feature_channels,
                k,
            );
        }
    }
    Ok(())
}

fn conv_params_into(
    params: &mut ParamStore,
    conv_name: &str,
    input: &GridStack,
    grad_out: &GridStack,
    kernel: usize,
) {
    let seg_w = params.segment(&format!("{conv_name}.weight")).clone();
    let seg_b = params.segment(&format!("{conv_name}.bias")).clone();
    debug_assert_eq!(seg_b.offset, seg_w.offset + seg_w.len, "bias follows weight");
    let grads = params.grads_mut();
    let (gw, gb) = grads[seg_w.offset..seg_b.offset + seg_b.len].split_at_mut(seg_w.len);
    conv_backward_params(input, grad_out, kernel, gw, gb);
}

fn accumulate(into: &mut GridStack, from: &GridStack) {
    for c in 0..into.channels() {
        for (a, &b) in into
            .channel_mut(c)
            .data_mut()
            .iter_mut()
            .zip(from.channel(c).data())
        {
            *a += b;
        }
    }
}

fn mul_dleaky(grad_act: &GridStack, pre: &GridStack) -> GridStack {
    let mut out = grad_act.clone();
    for c in 0..out.channels() {
        for (g, &z) in out
            .channel_mut(c)
            .data_mut()
            .iter_mut()
            .zip(pre.channel(c).data())
        {
            *g *= dleaky(z);
        }
    }
    out
}

/// Exponentially annealed softmax temperature with a floor:
/// `tau' = max(tau * decay, floor)`, applied once per optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct TemperatureSchedule {
    tau: f64,
    decay: f64,
    floor: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            tau: 1.0,
            decay: 0.995,
            floor: 0.1,
        }
    }
}

impl TemperatureSchedule {
    pub fn new(start: f64, decay: f64, floor: f64) -> Self {
        Self {
            tau: start,
            decay,
            floor,
        }
    }

    #[inline]
    pub fn current(&self) -> f64 {
        self.tau
    }

    /// Applies one decay step and returns the new temperature.
    pub fn step(&mut self) -> f64 {
        self.tau = (self.tau * self.decay).max(self.floor);
        self.tau
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{total_loss, LossConfig};
    use rand::Rng;

    fn small_config(k: usize) -> NetConfig {
        NetConfig {
            input_channels: 2,
            feature_channels: 5,
            num_experts: k,
            kernel_size: 3,
            encoder_layers: 2,
            seed: 42,
        }
    }

    fn random_input(h: usize, w: usize, channels: usize, seed: u64) -> GridStack {
        let mut rng = stream(seed, "net-test-input");
        GridStack::new(
            (0..channels)
                .map(|_| Grid::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn param_count_matches_layout() {
        for k in [1, 3] {
            let cfg = small_config(k);
            let params = ParamStore::init(&cfg).unwrap();
            assert_eq!(params.len(), cfg.param_count());
        }
        // Doubling the feature channels follows the closed form.
        let mut cfg = small_config(4);
        let base = cfg.param_count();
        cfg.feature_channels *= 2;
        assert_ne!(base, cfg.param_count());
        assert_eq!(ParamStore::init(&cfg).unwrap().len(), cfg.param_count());
    }

    #[test]
    fn decay_mask_false_exactly_on_biases() {
        let params = ParamStore::init(&small_config(2)).unwrap();
        let mask = params.decay_mask();
        for seg in params.segments() {
            let expect = !seg.name.ends_with(".bias");
            assert!(
                mask[seg.offset..seg.offset + seg.len].iter().all(|&m| m == expect),
                "segment {}",
                seg.name
            );
        }
    }

    #[test]
    fn zero_input_gives_zero_outputs_and_uniform_gate() {
        let cfg = small_config(4);
        let mut params = ParamStore::init(&cfg).unwrap();
        // The example's precondition is all-zero biases; the gate bias is
        // the only one initialized away from zero.
        let seg = params.segment("gate.bias").clone();
        params.values_mut()[seg.offset..seg.offset + seg.len].fill(0.0);
        let input = GridStack::zeros(cfg.input_channels, 6, 6);
        let trace = forward(&params, &input, 1.0).unwrap();
        for c in 0..4 {
            assert!(trace
                .output()
                .expert_depths()
                .channel(c)
                .data()
                .iter()
                .all(|&v| v == 0.0));
            assert!(trace
                .output()
                .gate()
                .logits()
                .channel(c)
                .data()
                .iter()
                .all(|&v| v == 0.0));
            assert!(trace
                .output()
                .gate()
                .weights()
                .channel(c)
                .data()
                .iter()
                .all(|&v| v == 0.25));
        }
        assert!(trace.output().fused_depth().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_expert_fuses_to_itself() {
        let cfg = small_config(1);
        let params = ParamStore::init(&cfg).unwrap();
        let input = random_input(5, 7, cfg.input_channels, 1);
        let trace = forward(&params, &input, 0.7).unwrap();
        assert_eq!(
            trace.output().fused_depth(),
            trace.output().expert_depths().channel(0)
        );
    }

    #[test]
    fn same_padding_preserves_dimensions() {
        let cfg = small_config(3);
        let params = ParamStore::init(&cfg).unwrap();
        let input = random_input(9, 4, cfg.input_channels, 2);
        let trace = forward(&params, &input, 1.0).unwrap();
        assert_eq!(trace.features().height(), 9);
        assert_eq!(trace.features().width(), 4);
        assert_eq!(trace.output().fused_depth().height(), 9);
        assert_eq!(trace.output().fused_depth().width(), 4);
    }

    #[test]
    fn perturbation_zero_sigma_is_identity() {
        let base: Vec<f64> = (0..100).map(|i| i as f64 * 0.01).collect();
        let copy = perturb_expert_values(&base, 0.0, 9, 0);
        assert_eq!(base, copy);
    }

    #[test]
    fn perturbation_std_close_to_sigma() {
        let base = vec![0.5; 20_000];
        let noisy = perturb_expert_values(&base, 1e-3, 7, 2);
        let devs: Vec<f64> = noisy.iter().zip(&base).map(|(a, b)| a - b).collect();
        let mean = devs.iter().sum::<f64>() / devs.len() as f64;
        let var = devs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / devs.len() as f64;
        let std = var.sqrt();
        assert!((std - 1e-3).abs() < 0.2e-3, "std={std}");
    }

    #[test]
    fn perturbation_is_seed_deterministic() {
        let base = vec![0.0; 64];
        let a = perturb_expert_values(&base, 1e-3, 3, 1);
        let b = perturb_expert_values(&base, 1e-3, 3, 1);
        let c = perturb_expert_values(&base, 1e-3, 4, 1);
        let d = perturb_expert_values(&base, 1e-3, 3, 2);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn identical_experts_make_fusion_gate_independent() {
        let cfg = small_config(4);
        let params = ParamStore::init_with_sigma(&cfg, 0.0).unwrap();
        let input = random_input(6, 6, cfg.input_channels, 3);
        let a = forward(&params, &input, 1.0).unwrap();
        let b = forward(&params, &input, 0.13).unwrap();
        for (x, y) in a
            .output()
            .fused_depth()
            .data()
            .iter()
            .zip(b.output().fused_depth().data())
        {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = small_config(3);
        let a = ParamStore::init(&cfg).unwrap();
        let b = ParamStore::init(&cfg).unwrap();
        assert_eq!(a.values(), b.values());
        let mut cfg2 = cfg.clone();
        cfg2.seed = 43;
        let c = ParamStore::init(&cfg2).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn backward_accumulates_linearly() {
        let cfg = small_config(2);
        let mut params = ParamStore::init(&cfg).unwrap();
        let input = random_input(5, 5, cfg.input_channels, 4);
        let trace = forward(&params, &input, 0.9).unwrap();
        let mut rng = stream(10, "upstream");
        let ge = GridStack::new(
            (0..2)
                .map(|_| Grid::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap();
        let gl = GridStack::new(
            (0..2)
                .map(|_| Grid::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap();

        // Zero upstream leaves the gradient untouched.
        let zero = GridStack::zeros(2, 5, 5);
        backward(&mut params, &trace, &zero, &zero).unwrap();
        assert!(params.grads().iter().all(|&g| g == 0.0));

        backward(&mut params, &trace, &ge, &gl).unwrap();
        let once = params.grads().to_vec();
        backward(&mut params, &trace, &ge, &gl).unwrap();
        for (o, t) in once.iter().zip(params.grads()) {
            assert!((2.0 * o - t).abs() <= 1e-15 * t.abs().max(1.0));
        }
    }

    #[test]
    fn backward_rejects_stale_trace() {
        let cfg = small_config(2);
        let mut params = ParamStore::init(&cfg).unwrap();
        let input = random_input(4, 4, cfg.input_channels, 5);
        let trace = forward(&params, &input, 1.0).unwrap();
        params.values_mut()[0] += 0.1;
        let zero = GridStack::zeros(2, 4, 4);
        assert!(matches!(
            backward(&mut params, &trace, &zero, &zero),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = NetConfig {
            input_channels: 2,
            feature_channels: 4,
            num_experts: 3,
            kernel_size: 3,
            encoder_layers: 2,
            seed: 7,
        };
        let mut params = ParamStore::init(&cfg).unwrap();
        let input = random_input(6, 6, cfg.input_channels, 6);
        let mut rng = stream(8, "net-fd-gt");
        let gt = Grid::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let loss_cfg = LossConfig {
            lambda_e: 0.05,
            ..LossConfig::default()
        };
        let tau = 0.8;

        let eval = |p: &ParamStore| -> f64 {
            let trace = forward(p, &input, tau).unwrap();
            total_loss(trace.output(), &gt, &loss_cfg).unwrap().0.total
        };

        let trace = forward(&params, &input, tau).unwrap();
        let (_, grads) = total_loss(trace.output(), &gt, &loss_cfg).unwrap();
        backward(&mut params, &trace, &grads.expert_means, &grads.logits).unwrap();

        let analytic = params.grads().to_vec();
        let step = 1e-6;
        let mut max_rel: f64 = 0.0;
        for idx in 0..params.len() {
            let mut p = params.clone();
            p.values_mut()[idx] += step;
            let plus = eval(&p);
            let mut m = params.clone();
            m.values_mut()[idx] -= step;
            let minus = eval(&m);
            let num = (plus - minus) / (2.0 * step);
            let ana = analytic[idx];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-5);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel} over all parameters");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.mdc");
        let cfg = small_config(3);
        let params = ParamStore::init(&cfg).unwrap();
        params.save_checkpoint(&path).unwrap();
        let back = ParamStore::load_checkpoint(&path).unwrap();
        assert_eq!(back.config(), params.config());
        assert_eq!(back.values().len(), params.values().len());
        for (a, b) in params.values().iter().zip(back.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.mdc");
        let params = ParamStore::init(&small_config(2)).unwrap();
        params.save_checkpoint(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            ParamStore::load_checkpoint(&path),
            Err(Error::Format { .. })
        ));

        let params_bytes = {
            let mut b = Vec::new();
            params.save_checkpoint(&path).unwrap();
            std::fs::File::open(&path).unwrap().read_to_end(&mut b).unwrap();
            b
        };
        let mut truncated = params_bytes.clone();
        truncated.truncate(truncated.len() - 3);
        std::fs::write(&path, &truncated).unwrap();
        assert!(matches!(
            ParamStore::load_checkpoint(&path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn temperature_schedule_decays_to_floor() {
        let mut sched = TemperatureSchedule::default();
        assert!((sched.step() - 0.995).abs() < 1e-15);
        let mut sched = TemperatureSchedule::new(0.1, 0.995, 0.1);
        assert_eq!(sched.step(), 0.1);

        // Per-step decay from 1.0 reaches the floor exactly at step 460.
        let mut sched = TemperatureSchedule::default();
        let mut n = 0;
        while sched.current() > 0.1 {
            sched.step();
            n += 1;
            assert!(n < 10_000);
        }
        assert_eq!(n, 460);
    }
}
