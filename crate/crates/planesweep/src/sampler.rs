//! Producers of the per-pixel sampling distribution used to place hypothesis
//! planes at stages two and up.
//!
//! Two implementations sit behind one trait: a training-free heuristic that
//! concentrates planes around the previous estimate in proportion to how
//! non-uniform the previous stage's sample cost was, and a small trainable
//! network operating on independent 8x8 image patches.

use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid, Volume};
use crate::io::params::ParamBlob;
use crate::sampling::{check_plane_count, SampleCost, SamplingDistribution};

pub const PATCH_SIZE: usize = 8;
pub const HIDDEN_CHANNELS: usize = 32;
pub const PE_DIM: usize = 8;

/// Everything the distribution producers see: the previous stage's sample
/// cost, its depth estimate normalized to [0, 1] by the scene depth range,
/// and the reference luminance normalized to [0, 1]. All grids share the
/// current stage's resolution.
#[derive(Debug, Clone, Copy)]
pub struct SamplerInput<'a> {
    pub sample_cost: &'a SampleCost,
    pub prev_depth: &'a Grid<f64>,
    pub reference: &'a Grid<f64>,
}

impl<'a> SamplerInput<'a> {
    pub fn new(
        sample_cost: &'a SampleCost,
        prev_depth: &'a Grid<f64>,
        reference: &'a Grid<f64>,
    ) -> Result<Self> {
        let vol = sample_cost.volume();
        if vol.height() != prev_depth.height()
            || vol.width() != prev_depth.width()
            || !prev_depth.same_shape(reference)
        {
            return Err(Error::Shape(
                "sampler inputs must share one spatial resolution".into(),
            ));
        }
        Ok(Self {
            sample_cost,
            prev_depth,
            reference,
        })
    }

    pub fn height(&self) -> usize {
        self.prev_depth.height()
    }

    pub fn width(&self) -> usize {
        self.prev_depth.width()
    }
}

/// A source of per-pixel sampling distributions for one cascade stage.
pub trait DistributionProducer {
    fn produce(&self, input: &SamplerInput, plane_count: usize) -> Result<SamplingDistribution>;
}

/// Always the uniform distribution; stages degenerate to equal spacing.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformProducer;

impl DistributionProducer for UniformProducer {
    fn produce(&self, input: &SamplerInput, plane_count: usize) -> Result<SamplingDistribution> {
        SamplingDistribution::uniform(input.height(), input.width(), plane_count)
    }
}

/// Training-free stand-in for the learned sampler.
#[derive(Debug, Clone, Copy)]
pub struct HeuristicProducer {
    pub sharpness: f64,
}

impl DistributionProducer for HeuristicProducer {
    fn produce(&self, input: &SamplerInput, plane_count: usize) -> Result<SamplingDistribution> {
        heuristic_distribution(input, plane_count, self.sharpness)
    }
}

/// The trained patch network.
#[derive(Debug, Clone)]
pub struct PatchNetProducer {
    pub params: PatchNetParams,
}

impl DistributionProducer for PatchNetProducer {
    fn produce(&self, input: &SamplerInput, plane_count: usize) -> Result<SamplingDistribution> {
        if plane_count != self.params.d_out {
            return Err(Error::Config(format!(
                "patch network emits {} planes, stage wants {plane_count}",
                self.params.d_out
            )));
        }
        patchnet_forward(input, &self.params)
    }
}

/// Heuristic sampling distribution driven by the previous stage's sample
/// cost: plane positions whose sample-cost share sat below uniform (the
/// previous planes there clustered near the estimate) get tighter intervals,
/// positions above uniform get wider ones.
///
/// Per output plane j, the sample cost is linearly interpolated at the
/// matching relative index position and recentered into a score
/// D_prev * ΔS - 1 (zero when ΔS is uniform). Interval shares are the
/// per-pixel softmax of sharpness * score, so low-deviation positions
/// receive small intervals. Sharpness zero or a perfectly uniform sample
/// cost both reproduce uniform sampling exactly.
pub fn heuristic_distribution(
    input: &SamplerInput,
    plane_count: usize,
    sharpness: f64,
) -> Result<SamplingDistribution> {
    check_plane_count(plane_count)?;
    if !(sharpness >= 0.0) {
        return Err(Error::Config(format!(
            "sharpness must be non-negative, got {sharpness}"
        )));
    }
    let (h, w) = (input.height(), input.width());
    let d_prev = input.sample_cost.plane_count();
    // Relative index positions of the output planes inside the input vector.
    let positions: Vec<f64> = (0..plane_count)
        .map(|j| {
            if plane_count == 1 {
                0.0
            } else {
                j as f64 * (d_prev - 1) as f64 / (plane_count - 1) as f64
            }
        })
        .collect();
    let mut scores = vec![0.0; plane_count];
    let mut out = Volume::zeros(h, w, plane_count);
    for y in 0..h {
        for x in 0..w {
            let sc = input.sample_cost.pixel(y, x);
            for (j, &u) in positions.iter().enumerate() {
                let i0 = (u.floor() as usize).min(d_prev - 1);
                let i1 = (i0 + 1).min(d_prev - 1);
                let f = u - i0 as f64;
                let interp = (1.0 - f) * sc[i0] + f * sc[i1];
                scores[j] = d_prev as f64 * interp - 1.0;
            }
            let probs = out.pixel_mut(y, x);
            let max = scores
                .iter()
                .map(|s| sharpness * s)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..plane_count {
                let e = (sharpness * scores[j] - max).exp();
                probs[j] = e;
                sum += e;
            }
            for v in probs.iter_mut() {
                *v /= sum;
            }
        }
    }
    SamplingDistribution::new(out)
}

// ---------------------------------------------------------------------------
// Patch network
// ---------------------------------------------------------------------------

/// Sinusoidal encoding of plane indices, one `PE_DIM`-vector per plane.
pub fn positional_encoding(plane_count: usize) -> Vec<[f64; PE_DIM]> {
    (0..plane_count)
        .map(|j| {
            let mut enc = [0.0; PE_DIM];
            for q in 0..PE_DIM / 2 {
                let omega = 10_000f64.powf(-(q as f64) / (PE_DIM / 2) as f64);
                enc[2 * q] = (j as f64 * omega).sin();
                enc[2 * q + 1] = (j as f64 * omega).cos();
            }
            enc
        })
        .collect()
}

/// Weights of the patch network: a 1x1 stem into 32 channels, two residual
/// blocks of (3x3 conv, bias, ReLU) x2 confined to 8x8 patches, and a 1x1
/// head of one logit per plane. Plane-index positional encodings are
/// projected into extra input channels and added to the output logits
/// through the learned `pe_w` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchNetParams {
    d_prev: usize,
    d_out: usize,
    stem_w: Vec<f64>, // [hidden][c_in]
    stem_b: Vec<f64>,
    b1_w1: Vec<f64>, // [hidden][3][3][hidden]
    b1_b1: Vec<f64>,
    b1_w2: Vec<f64>,
    b1_b2: Vec<f64>,
    b2_w1: Vec<f64>,
    b2_b1: Vec<f64>,
    b2_w2: Vec<f64>,
    b2_b2: Vec<f64>,
    head_w: Vec<f64>, // [d_out][hidden]
    head_b: Vec<f64>,
    pe_w: Vec<f64>, // [PE_DIM]
}

const TENSOR_NAMES: [&str; 13] = [
    "stem_w", "stem_b", "b1_w1", "b1_b1", "b1_w2", "b1_b2", "b2_w1", "b2_b1", "b2_w2", "b2_b2",
    "head_w", "head_b", "pe_w",
];

/// Input channels: previous sample cost, normalized depth, luminance, and
/// the positional-encoding projection of the sample cost.
fn input_channels(d_prev: usize) -> usize {
    d_prev + 2 + PE_DIM
}

impl PatchNetParams {
    /// Deterministic random initialization; values are quantized to f32 so
    /// that saving and reloading reproduces them exactly.
    pub fn seeded(seed: u64, d_prev: usize, d_out: usize) -> Result<Self> {
        check_plane_count(d_out)?;
        if d_prev == 0 {
            return Err(Error::Config("previous plane count must be positive".into()));
        }
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let c_in = input_channels(d_prev);
        let h = HIDDEN_CHANNELS;
        let mut init = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = (1.0 / fan_in as f64).sqrt();
            (0..n)
                .map(|_| (rng.gen_range(-bound..bound) as f32) as f64)
                .collect()
        };
        Ok(Self {
            d_prev,
            d_out,
            stem_w: init(h * c_in, c_in),
            stem_b: vec![(0.10f32) as f64; h],
            b1_w1: init(h * 9 * h, 9 * h),
            b1_b1: vec![(0.10f32) as f64; h],
            b1_w2: init(h * 9 * h, 9 * h),
            b1_b2: vec![(0.10f32) as f64; h],
            b2_w1: init(h * 9 * h, 9 * h),
            b2_b1: vec![(0.10f32) as f64; h],
            b2_w2: init(h * 9 * h, 9 * h),
            b2_b2: vec![(0.10f32) as f64; h],
            head_w: init(d_out * h, h),
            head_b: vec![0.0; d_out],
            pe_w: init(PE_DIM, PE_DIM),
        })
    }

    pub fn d_prev(&self) -> usize {
        self.d_prev
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    fn tensors(&self) -> [&Vec<f64>; 13] {
        [
            &self.stem_w, &self.stem_b, &self.b1_w1, &self.b1_b1, &self.b1_w2, &self.b1_b2,
            &self.b2_w1, &self.b2_b1, &self.b2_w2, &self.b2_b2, &self.head_w, &self.head_b,
            &self.pe_w,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 13] {
        [
            &mut self.stem_w, &mut self.stem_b, &mut self.b1_w1, &mut self.b1_b1, &mut self.b1_w2,
            &mut self.b1_b2, &mut self.b2_w1, &mut self.b2_b1, &mut self.b2_w2, &mut self.b2_b2,
            &mut self.head_w, &mut self.head_b, &mut self.pe_w,
        ]
    }

    pub fn tensor_names() -> &'static [&'static str] {
        &TENSOR_NAMES
    }

    /// Total scalar parameter count.
    pub fn flat_len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Flat-index range occupied by a named tensor.
    pub fn tensor_range(&self, name: &str) -> Option<Range<usize>> {
        let mut offset = 0;
        for (n, t) in TENSOR_NAMES.iter().zip(self.tensors()) {
            if *n == name {
                return Some(offset..offset + t.len());
            }
            offset += t.len();
        }
        None
    }

    pub fn get_flat(&self, index: usize) -> f64 {
        let mut i = index;
        for t in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("flat index {index} out of range");
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        let mut i = index;
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] = value;
                return;
            }
            i -= t.len();
        }
        panic!("flat index {index} out of range");
    }

    pub fn to_blob(&self) -> ParamBlob {
        let mut blob = ParamBlob::new();
        for (name, tensor) in TENSOR_NAMES.iter().zip(self.tensors()) {
            blob.push(name, &tensor_dims(name, self.d_prev, self.d_out), tensor.clone());
        }
        blob
    }

    pub fn from_blob(blob: &ParamBlob) -> Result<Self> {
        let head_b = blob
            .get("head_b")
            .ok_or_else(|| Error::Structure("head_b missing from parameter blob".into()))?;
        let stem_w = blob
            .get("stem_w")
            .ok_or_else(|| Error::Structure("stem_w missing from parameter blob".into()))?;
        if stem_w.dims.len() != 2 || stem_w.dims[0] != HIDDEN_CHANNELS {
            return Err(Error::Structure("stem_w has unexpected shape".into()));
        }
        let c_in = stem_w.dims[1];
        if c_in < 2 + PE_DIM + 1 {
            return Err(Error::Structure("stem_w implies no sample-cost channels".into()));
        }
        let d_prev = c_in - 2 - PE_DIM;
        let d_out = head_b.values.len();
        let mut params = Self::seeded(0, d_prev, d_out)?;
        for (name, tensor) in TENSOR_NAMES.iter().zip(params.tensors_mut()) {
            let values = blob.expect(name, &tensor_dims(name, d_prev, d_out))?;
            tensor.copy_from_slice(values);
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_blob().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_blob(&ParamBlob::load(path)?)
    }
}

fn tensor_dims(name: &str, d_prev: usize, d_out: usize) -> Vec<usize> {
    let c_in = input_channels(d_prev);
    let h = HIDDEN_CHANNELS;
    match name {
        "stem_w" => vec![h, c_in],
        "stem_b" | "b1_b1" | "b1_b2" | "b2_b1" | "b2_b2" => vec![h],
        "b1_w1" | "b1_w2" | "b2_w1" | "b2_w2" => vec![h, 3, 3, h],
        "head_w" => vec![d_out, h],
        "head_b" => vec![d_out],
        "pe_w" => vec![PE_DIM],
        _ => unreachable!(),
    }
}

/// Parameter gradients, same shapes and flat ordering as [`PatchNetParams`].
#[derive(Debug, Clone)]
pub struct PatchNetGrads {
    tensors: Vec<Vec<f64>>,
}

impl PatchNetGrads {
    fn zeros_like(params: &PatchNetParams) -> Self {
        Self {
            tensors: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn flat_len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn get_flat(&self, index: usize) -> f64 {
        let mut i = index;
        for t in &self.tensors {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("flat index {index} out of range");
    }

    fn tensor_mut(&mut self, idx: usize) -> &mut Vec<f64> {
        &mut self.tensors[idx]
    }

    /// params <- params - lr * grads
    pub fn apply_sgd(&self, params: &mut PatchNetParams, lr: f64) {
        let mut flat = 0;
        for t in &self.tensors {
            for &g in t {
                let v = params.get_flat(flat);
                params.set_flat(flat, v - lr * g);
                flat += 1;
            }
        }
    }
}

// Tensor indices in flat order.
const T_STEM_W: usize = 0;
const T_STEM_B: usize = 1;
const T_B1_W1: usize = 2;
const T_B1_B1: usize = 3;
const T_B1_W2: usize = 4;
const T_B1_B2: usize = 5;
const T_B2_W1: usize = 6;
const T_B2_B1: usize = 7;
const T_B2_W2: usize = 8;
const T_B2_B2: usize = 9;
const T_HEAD_W: usize = 10;
const T_HEAD_B: usize = 11;
const T_PE_W: usize = 12;

/// Stack the per-pixel input channels the network consumes.
fn assemble_input(input: &SamplerInput, d_prev: usize) -> Volume {
    let (h, w) = (input.height(), input.width());
    let c_in = input_channels(d_prev);
    let enc_prev = positional_encoding(d_prev);
    let mut vol = Volume::zeros(h, w, c_in);
    for y in 0..h {
        for x in 0..w {
            let sc = input.sample_cost.pixel(y, x);
            let px = vol.pixel_mut(y, x);
            px[..d_prev].copy_from_slice(sc);
            px[d_prev] = input.prev_depth.at(y, x);
            px[d_prev + 1] = input.reference.at(y, x);
            for m in 0..PE_DIM {
                let mut acc = 0.0;
                for (j, e) in enc_prev.iter().enumerate() {
                    acc += sc[j] * e[m];
                }
                px[d_prev + 2 + m] = acc;
            }
        }
    }
    vol
}

/// Patch-local 3x3 convolution over the fixed hidden width, zero-padded at
/// the patch border. Layouts: activations (y, x, c) with c contiguous;
/// weights [c_out][ky][kx][c_in].
///
/// The weights are transposed to [tap][c_in][c_out] so the inner update runs
/// contiguously over output channels into a stack accumulator; zero
/// activations (common after ReLU) are skipped.
fn conv3x3_patch(input: &[f64], c_in: usize, weights: &[f64], bias: &[f64], out: &mut [f64]) {
    const H: usize = HIDDEN_CHANNELS;
    debug_assert_eq!(c_in, H);
    debug_assert_eq!(bias.len(), H);
    let n = PATCH_SIZE;
    let mut wt = [0.0; 9 * H * H];
    for co in 0..H {
        for tap in 0..9 {
            for ci in 0..H {
                wt[(tap * H + ci) * H + co] = weights[(co * 9 + tap) * H + ci];
            }
        }
    }
    let mut acc = [0.0; H];
    for y in 0..n {
        for x in 0..n {
            acc.copy_from_slice(bias);
            for ky in 0..3usize {
                let iy = y as isize + ky as isize - 1;
                if iy < 0 || iy >= n as isize {
                    continue;
                }
                for kx in 0..3usize {
                    let ix = x as isize + kx as isize - 1;
                    if ix < 0 || ix >= n as isize {
                        continue;
                    }
                    let src = &input[((iy as usize) * n + ix as usize) * H..][..H];
                    let tap = ky * 3 + kx;
                    for (ci, &sv) in src.iter().enumerate() {
                        if sv == 0.0 {
                            continue;
                        }
                        let wrow = &wt[(tap * H + ci) * H..][..H];
                        for co in 0..H {
                            acc[co] += wrow[co] * sv;
                        }
                    }
                }
            }
            out[(y * n + x) * H..(y * n + x + 1) * H].copy_from_slice(&acc);
        }
    }
}

/// Backward pass of [`conv3x3_patch`]: accumulates weight/bias gradients and
/// the gradient w.r.t. the input activations.
#[allow(clippy::too_many_arguments)]
fn conv3x3_patch_backward(
    input: &[f64],
    c_in: usize,
    weights: &[f64],
    c_out: usize,
    g_out: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    g_in: &mut [f64],
) {
    let n = PATCH_SIZE;
    for y in 0..n {
        for x in 0..n {
            let go = &g_out[(y * n + x) * c_out..][..c_out];
            for (co, &g) in go.iter().enumerate() {
                db[co] += g;
            }
            for ky in 0..3usize {
                let iy = y as isize + ky as isize - 1;
                if iy < 0 || iy >= n as isize {
                    continue;
                }
                for kx in 0..3usize {
                    let ix = x as isize + kx as isize - 1;
                    if ix < 0 || ix >= n as isize {
                        continue;
                    }
                    let base = ((iy as usize) * n + ix as usize) * c_in;
                    let src = &input[base..base + c_in];
                    let tap = (ky * 3 + kx) * c_in;
                    for (co, &g) in go.iter().enumerate() {
                        let wrow = &weights[co * 9 * c_in + tap..][..c_in];
                        let dwrow = &mut dw[co * 9 * c_in + tap..][..c_in];
                        let gin = &mut g_in[base..base + c_in];
                        for ci in 0..c_in {
                            dwrow[ci] += g * src[ci];
                            gin[ci] += g * wrow[ci];
                        }
                    }
                }
            }
        }
    }
}

struct PatchTrace {
    x: Vec<f64>,
    stem_pre: Vec<f64>,
    stem: Vec<f64>,
    u1_pre: Vec<f64>,
    u1: Vec<f64>,
    v1_pre: Vec<f64>,
    y1: Vec<f64>,
    u2_pre: Vec<f64>,
    u2: Vec<f64>,
    v2_pre: Vec<f64>,
    y2: Vec<f64>,
    probs: Vec<f64>,
}

fn relu(src: &[f64]) -> Vec<f64> {
    src.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

fn forward_patch(params: &PatchNetParams, x: Vec<f64>, pe_term: &[f64]) -> PatchTrace {
    let n = PATCH_SIZE * PATCH_SIZE;
    let h = HIDDEN_CHANNELS;
    let c_in = input_channels(params.d_prev);

    // stem: per-pixel linear map into the hidden width
    let mut stem_pre = vec![0.0; n * h];
    for p in 0..n {
        let src = &x[p * c_in..(p + 1) * c_in];
        let dst = &mut stem_pre[p * h..(p + 1) * h];
        for co in 0..h {
            let wrow = &params.stem_w[co * c_in..(co + 1) * c_in];
            let mut acc = params.stem_b[co];
            for (wv, sv) in wrow.iter().zip(src) {
                acc += wv * sv;
            }
            dst[co] = acc;
        }
    }
    let stem = relu(&stem_pre);

    let mut u1_pre = vec![0.0; n * h];
    conv3x3_patch(&stem, h, &params.b1_w1, &params.b1_b1, &mut u1_pre);
    let u1 = relu(&u1_pre);
    let mut v1_pre = vec![0.0; n * h];
    conv3x3_patch(&u1, h, &params.b1_w2, &params.b1_b2, &mut v1_pre);
    let v1 = relu(&v1_pre);
    let y1: Vec<f64> = stem.iter().zip(&v1).map(|(a, b)| a + b).collect();

    let mut u2_pre = vec![0.0; n * h];
    conv3x3_patch(&y1, h, &params.b2_w1, &params.b2_b1, &mut u2_pre);
    let u2 = relu(&u2_pre);
    let mut v2_pre = vec![0.0; n * h];
    conv3x3_patch(&u2, h, &params.b2_w2, &params.b2_b2, &mut v2_pre);
    let v2 = relu(&v2_pre);
    let y2: Vec<f64> = y1.iter().zip(&v2).map(|(a, b)| a + b).collect();

    // head + softmax
    let d_out = params.d_out;
    let mut probs = vec![0.0; n * d_out];
    let mut logits = vec![0.0; d_out];
    for p in 0..n {
        let feat = &y2[p * h..(p + 1) * h];
        for j in 0..d_out {
            let wrow = &params.head_w[j * h..(j + 1) * h];
            let mut acc = params.head_b[j] + pe_term[j];
            for (wv, sv) in wrow.iter().zip(feat) {
                acc += wv * sv;
            }
            logits[j] = acc;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut probs[p * d_out..(p + 1) * d_out];
        let mut sum = 0.0;
        for j in 0..d_out {
            let e = (logits[j] - max).exp();
            dst[j] = e;
            sum += e;
        }
        for v in dst.iter_mut() {
            *v /= sum;
        }
    }

    PatchTrace {
        x,
        stem_pre,
        stem,
        u1_pre,
        u1,
        v1_pre,
        y1,
        u2_pre,
        u2,
        v2_pre,
        y2,
        probs,
    }
}

fn backward_patch(
    params: &PatchNetParams,
    trace: &PatchTrace,
    upstream: &[f64], // dJ/dP for this patch, (y, x, j)
    enc_out: &[[f64; PE_DIM]],
    grads: &mut PatchNetGrads,
) {
    let n = PATCH_SIZE * PATCH_SIZE;
    let h = HIDDEN_CHANNELS;
    let d_out = params.d_out;
    let c_in = input_channels(params.d_prev);

    // Softmax backward, then the head.
    let mut g_y2 = vec![0.0; n * h];
    let mut g_logit = vec![0.0; d_out];
    for p in 0..n {
        let probs = &trace.probs[p * d_out..(p + 1) * d_out];
        let up = &upstream[p * d_out..(p + 1) * d_out];
        let dot: f64 = probs.iter().zip(up).map(|(a, b)| a * b).sum();
        for j in 0..d_out {
            g_logit[j] = probs[j] * (up[j] - dot);
        }
        let feat = &trace.y2[p * h..(p + 1) * h];
        let gy = &mut g_y2[p * h..(p + 1) * h];
        for j in 0..d_out {
            let g = g_logit[j];
            grads.tensor_mut(T_HEAD_B)[j] += g;
            for m in 0..PE_DIM {
                grads.tensor_mut(T_PE_W)[m] += g * enc_out[j][m];
            }
            let wrow = &params.head_w[j * h..(j + 1) * h];
            let dwrow = &mut grads.tensors[T_HEAD_W][j * h..(j + 1) * h];
            for c in 0..h {
                dwrow[c] += g * feat[c];
                gy[c] += g * wrow[c];
            }
        }
    }

    // Block 2: y2 = y1 + relu(conv_b(relu(conv_a(y1)))).
    let g_v2: Vec<f64> = g_y2
        .iter()
        .zip(&trace.v2_pre)
        .map(|(&g, &pre)| if pre > 0.0 { g } else { 0.0 })
        .collect();
    let mut g_u2 = vec![0.0; n * h];
    {
        let (dw, rest) = grads.tensors.split_at_mut(T_B2_B2);
        conv3x3_patch_backward(
            &trace.u2,
            h,
            &params.b2_w2,
            h,
            &g_v2,
            &mut dw[T_B2_W2],
            &mut rest[0],
            &mut g_u2,
        );
    }
    let g_u2_pre: Vec<f64> = g_u2
        .iter()
        .zip(&trace.u2_pre)
        .map(|(&g, &pre)| if pre > 0.0 { g } else { 0.0 })
        .collect();
    let mut g_y1 = g_y2; // skip connection
    {
        let (dw, rest) = grads.tensors.split_at_mut(T_B2_B1);
        conv3x3_patch_backward(
            &trace.y1,
            h,
            &params.b2_w1,
            h,
            &g_u2_pre,
            &mut dw[T_B2_W1],
            &mut rest[0],
            &mut g_y1,
        );
    }

    // Block 1.
    let g_v1: Vec<f64> = g_y1
        .iter()
        .zip(&trace.v1_pre)
        .map(|(&g, &pre)| if pre > 0.0 { g } else { 0.0 })
        .collect();
    let mut g_u1 = vec![0.0; n * h];
    {
        let (dw, rest) = grads.tensors.split_at_mut(T_B1_B2);
        conv3x3_patch_backward(
            &trace.u1,
            h,
            &params.b1_w2,
            h,
            &g_v1,
            &mut dw[T_B1_W2],
            &mut rest[0],
            &mut g_u1,
        );
    }
    let g_u1_pre: Vec<f64> = g_u1
        .iter()
        .zip(&trace.u1_pre)
        .map(|(&g, &pre)| if pre > 0.0 { g } else { 0.0 })
        .collect();
    let mut g_stem = g_y1; // skip connection
    {
        let (dw, rest) = grads.tensors.split_at_mut(T_B1_B1);
        conv3x3_patch_backward(
            &trace.stem,
            h,
            &params.b1_w1,
            h,
            &g_u1_pre,
            &mut dw[T_B1_W1],
            &mut rest[0],
            &mut g_stem,
        );
    }

    // Stem.
    for p in 0..n {
        let src = &trace.x[p * c_in..(p + 1) * c_in];
        for co in 0..h {
            let pre = trace.stem_pre[p * h + co];
            if pre <= 0.0 {
                continue;
            }
            let g = g_stem[p * h + co];
            grads.tensors[T_STEM_B][co] += g;
            let dwrow = &mut grads.tensors[T_STEM_W][co * c_in..(co + 1) * c_in];
            for ci in 0..c_in {
                dwrow[ci] += g * src[ci];
            }
        }
    }
}

fn check_patch_dims(input: &SamplerInput) -> Result<(usize, usize)> {
    let (h, w) = (input.height(), input.width());
    if h % PATCH_SIZE != 0 || w % PATCH_SIZE != 0 {
        return Err(Error::Shape(format!(
            "patch network needs dimensions divisible by {PATCH_SIZE}, got {h}x{w}"
        )));
    }
    Ok((h, w))
}

fn extract_patch(vol: &Volume, py: usize, px: usize) -> Vec<f64> {
    let c = vol.depth();
    let mut out = Vec::with_capacity(PATCH_SIZE * PATCH_SIZE * c);
    for y in 0..PATCH_SIZE {
        for x in 0..PATCH_SIZE {
            out.extend_from_slice(vol.pixel(py * PATCH_SIZE + y, px * PATCH_SIZE + x));
        }
    }
    out
}

/// Deterministic forward pass. Patches are processed independently: the
/// output inside a patch depends only on inputs inside that patch.
pub fn patchnet_forward(
    input: &SamplerInput,
    params: &PatchNetParams,
) -> Result<SamplingDistribution> {
    let (h, w) = check_patch_dims(input)?;
    if input.sample_cost.plane_count() != params.d_prev {
        return Err(Error::Shape(format!(
            "sample cost has {} planes, network expects {}",
            input.sample_cost.plane_count(),
            params.d_prev
        )));
    }
    let x = assemble_input(input, params.d_prev);
    let enc_out = positional_encoding(params.d_out);
    let pe_term: Vec<f64> = enc_out
        .iter()
        .map(|e| e.iter().zip(&params.pe_w).map(|(a, b)| a * b).sum())
        .collect();
    let mut probs = Volume::zeros(h, w, params.d_out);
    for py in 0..h / PATCH_SIZE {
        for px in 0..w / PATCH_SIZE {
            let trace = forward_patch(params, extract_patch(&x, py, px), &pe_term);
            for y in 0..PATCH_SIZE {
                for xx in 0..PATCH_SIZE {
                    let src = &trace.probs
                        [(y * PATCH_SIZE + xx) * params.d_out..][..params.d_out];
                    probs
                        .pixel_mut(py * PATCH_SIZE + y, px * PATCH_SIZE + xx)
                        .copy_from_slice(src);
                }
            }
        }
    }
    SamplingDistribution::new(probs)
}

/// Analytic reverse-mode gradient of the forward map with respect to every
/// parameter, contracted against `upstream` = dJ/d(output distribution).
pub fn patchnet_gradient(
    input: &SamplerInput,
    params: &PatchNetParams,
    upstream: &Volume,
) -> Result<PatchNetGrads> {
    let (h, w) = check_patch_dims(input)?;
    if upstream.height() != h || upstream.width() != w || upstream.depth() != params.d_out {
        return Err(Error::Shape("upstream gradient shape mismatch".into()));
    }
    if input.sample_cost.plane_count() != params.d_prev {
        return Err(Error::Shape("sample cost plane count mismatch".into()));
    }
    let x = assemble_input(input, params.d_prev);
    let enc_out = positional_encoding(params.d_out);
    let pe_term: Vec<f64> = enc_out
        .iter()
        .map(|e| e.iter().zip(&params.pe_w).map(|(a, b)| a * b).sum())
        .collect();
    let mut grads = PatchNetGrads::zeros_like(params);
    for py in 0..h / PATCH_SIZE {
        for px in 0..w / PATCH_SIZE {
            let trace = forward_patch(params, extract_patch(&x, py, px), &pe_term);
            let up = extract_patch(upstream, py, px);
            backward_patch(params, &trace, &up, &enc_out, &mut grads);
        }
    }
    Ok(grads)
}

/// One step of plain gradient descent on the cross-entropy between the
/// network output and a target distribution. Returns the loss before the
/// step. A toy training hook; the cascade itself never calls this.
pub fn sgd_step(
    params: &mut PatchNetParams,
    input: &SamplerInput,
    target: &SamplingDistribution,
    lr: f64,
) -> Result<f64> {
    let out = patchnet_forward(input, params)?;
    let (h, w, d) = out.volume().shape();
    if target.volume().shape() != (h, w, d) {
        return Err(Error::Shape("target distribution shape mismatch".into()));
    }
    let norm = 1.0 / (h * w) as f64;
    let mut loss = 0.0;
    let mut upstream = Volume::zeros(h, w, d);
    for y in 0..h {
        for x in 0..w {
            let p = out.pixel(y, x);
            let t = target.pixel(y, x);
            let g = upstream.pixel_mut(y, x);
            for j in 0..d {
                let pj = p[j].max(1e-300);
                loss -= norm * t[j] * pj.ln();
                g[j] = -norm * t[j] / pj;
            }
        }
    }
    let grads = patchnet_gradient(input, params, &upstream)?;
    grads.apply_sgd(params, lr);
    Ok(loss)
}

/// One patch network per stage transition: the cascade asks each refinement
/// stage for a different (input planes, output planes) pair, and the matching
/// network is selected by shape.
#[derive(Debug, Clone)]
pub struct StagePatchNets {
    nets: Vec<PatchNetParams>,
}

impl StagePatchNets {
    pub fn seeded(seed: u64, transitions: &[(usize, usize)]) -> Result<Self> {
        let nets = transitions
            .iter()
            .enumerate()
            .map(|(i, &(d_prev, d_out))| PatchNetParams::seeded(seed ^ (i as u64) << 32, d_prev, d_out))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { nets })
    }

    pub fn nets(&self) -> &[PatchNetParams] {
        &self.nets
    }

    pub fn to_blob(&self) -> ParamBlob {
        let mut blob = ParamBlob::new();
        for (i, net) in self.nets.iter().enumerate() {
            for tensor in net.to_blob().tensors() {
                blob.push(&format!("net{i}_{}", tensor.name), &tensor.dims, tensor.values.clone());
            }
        }
        blob
    }

    pub fn from_blob(blob: &ParamBlob) -> Result<Self> {
        let mut nets = Vec::new();
        for i in 0.. {
            let prefix = format!("net{i}_");
            let mut sub = ParamBlob::new();
            for tensor in blob.tensors() {
                if let Some(stripped) = tensor.name.strip_prefix(&prefix) {
                    sub.push(stripped, &tensor.dims, tensor.values.clone());
                }
            }
            if sub.tensors().is_empty() {
                break;
            }
            nets.push(PatchNetParams::from_blob(&sub)?);
        }
        if nets.is_empty() {
            return Err(Error::Structure("parameter blob holds no patch networks".into()));
        }
        Ok(Self { nets })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_blob().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_blob(&ParamBlob::load(path)?)
    }
}

impl DistributionProducer for StagePatchNets {
    fn produce(&self, input: &SamplerInput, plane_count: usize) -> Result<SamplingDistribution> {
        let d_prev = input.sample_cost.plane_count();
        let net = self
            .nets
            .iter()
            .find(|n| n.d_prev() == d_prev && n.d_out() == plane_count)
            .ok_or_else(|| {
                Error::Config(format!(
                    "no patch network for the {d_prev} -> {plane_count} plane transition"
                ))
            })?;
        patchnet_forward(input, net)
    }
}
