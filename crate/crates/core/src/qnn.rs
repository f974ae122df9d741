//! Patch quality network.
//!
//! A 32x32 locally normalized patch goes through 50 valid 7x7 convolutions
//! (26x26 responses each), a global max-pool and min-pool per response map
//! (100 features), a 100-unit ReLU layer, and a single sigmoid output. The
//! output follows the DMOS convention: larger means worse quality.
//!
//! All parameters live in one flat vector laid out in file order, which keeps
//! SGD updates and serialization trivial. [`Gradient`] shares that layout.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{
    extract_patch, gaussian_blur, local_normalize, GrayImage, Patch32, PATCH_CENTER, PATCH_SIZE,
};

pub const NUM_FILTERS: usize = 50;
pub const KERNEL: usize = 7;
pub const CONV_OUT: usize = PATCH_SIZE - KERNEL + 1;
pub const POOL: usize = 26;
pub const FEATURES: usize = 2 * NUM_FILTERS;
pub const HIDDEN: usize = 100;
pub const NORM_WINDOW: usize = 7;

const _: () = assert!(CONV_OUT == 26);
const _: () = assert!(CONV_OUT / POOL == 1 && CONV_OUT.is_multiple_of(POOL));
const _: () = assert!(FEATURES == 100);

const KK: usize = KERNEL * KERNEL;
const CONV_W: usize = 0;
const CONV_B: usize = CONV_W + NUM_FILTERS * KK;
const FC1_W: usize = CONV_B + NUM_FILTERS;
const FC1_B: usize = FC1_W + HIDDEN * FEATURES;
const FC2_W: usize = FC1_B + HIDDEN;
const FC2_B: usize = FC2_W + HIDDEN;
pub const NUM_PARAMS: usize = FC2_B + 1;

const MODEL_MAGIC: &[u8; 4] = b"QNN1";
const SHAPE_HEADER: [u32; 6] = [
    NUM_FILTERS as u32,
    KERNEL as u32,
    KERNEL as u32,
    HIDDEN as u32,
    FEATURES as u32,
    1,
];

macro_rules! param_views {
    ($ty:ty) => {
        impl $ty {
            /// Filter-major, row-major 7x7 kernels.
            pub fn conv_weights(&self) -> &[f64] {
                &self.params[CONV_W..CONV_B]
            }
            pub fn conv_biases(&self) -> &[f64] {
                &self.params[CONV_B..FC1_W]
            }
            /// Row-major `[hidden][feature]`.
            pub fn fc1_weights(&self) -> &[f64] {
                &self.params[FC1_W..FC1_B]
            }
            pub fn fc1_biases(&self) -> &[f64] {
                &self.params[FC1_B..FC2_W]
            }
            pub fn fc2_weights(&self) -> &[f64] {
                &self.params[FC2_W..FC2_B]
            }
            pub fn fc2_bias(&self) -> f64 {
                self.params[FC2_B]
            }
            pub fn conv_weights_mut(&mut self) -> &mut [f64] {
                &mut self.params[CONV_W..CONV_B]
            }
            pub fn conv_biases_mut(&mut self) -> &mut [f64] {
                &mut self.params[CONV_B..FC1_W]
            }
            pub fn fc1_weights_mut(&mut self) -> &mut [f64] {
                &mut self.params[FC1_W..FC1_B]
            }
            pub fn fc1_biases_mut(&mut self) -> &mut [f64] {
                &mut self.params[FC1_B..FC2_W]
            }
            pub fn fc2_weights_mut(&mut self) -> &mut [f64] {
                &mut self.params[FC2_W..FC2_B]
            }
            pub fn fc2_bias_mut(&mut self) -> &mut f64 {
                &mut self.params[FC2_B]
            }
            /// Every parameter in serialization order.
            pub fn params(&self) -> &[f64] {
                &self.params
            }
            pub fn params_mut(&mut self) -> &mut [f64] {
                &mut self.params
            }
        }
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct QnnModel {
    params: Vec<f64>,
}

/// Loss gradient with the same layout as [`QnnModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    params: Vec<f64>,
}

param_views!(QnnModel);
param_views!(Gradient);

impl Gradient {
    pub fn zeros() -> Self {
        Self {
            params: vec![0.0; NUM_PARAMS],
        }
    }
}

impl Default for QnnModel {
    fn default() -> Self {
        Self::zeros()
    }
}

impl QnnModel {
    pub fn zeros() -> Self {
        Self {
            params: vec![0.0; NUM_PARAMS],
        }
    }

    /// Weights uniform in `[-0.05, 0.05]`, biases zero.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros();
        for range in [CONV_W..CONV_B, FC1_W..FC1_B, FC2_W..FC2_B] {
            for p in &mut m.params[range] {
                *p = rng.random_range(-0.05..=0.05);
            }
        }
        m
    }

    pub fn from_params(params: Vec<f64>) -> Result<Self> {
        if params.len() != NUM_PARAMS {
            return Err(Error::Model(format!(
                "expected {NUM_PARAMS} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Model("non-finite parameter".into()));
        }
        Ok(Self { params })
    }

    pub fn version(&self) -> u32 {
        1
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 24 + 4 * NUM_PARAMS);
        out.extend_from_slice(MODEL_MAGIC);
        for d in SHAPE_HEADER {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &p in &self.params {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 28 || &bytes[..4] != MODEL_MAGIC {
            return Err(Error::Model("missing QNN1 header".into()));
        }
        for (i, &expected) in SHAPE_HEADER.iter().enumerate() {
            let at = 4 + 4 * i;
            let got = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
            if got != expected {
                return Err(Error::Model(format!(
                    "shape header field {i} is {got}, expected {expected}"
                )));
            }
        }
        let body = &bytes[28..];
        if body.len() != 4 * NUM_PARAMS {
            return Err(Error::Model(format!(
                "weight block has {} bytes, expected {}",
                body.len(),
                4 * NUM_PARAMS
            )));
        }
        let params = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::from_params(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Quality score of one patch, strictly inside `(0, 1)`.
    pub fn forward(&self, patch: &Patch32) -> Result<f64> {
        Ok(self.forward_cached(patch)?.output)
    }

    fn forward_cached(&self, patch: &Patch32) -> Result<ForwardCache> {
        let mut features = [0.0; FEATURES];
        let mut argmax = [0usize; NUM_FILTERS];
        let mut argmin = [0usize; NUM_FILTERS];
        let w = self.conv_weights();
        let b = self.conv_biases();
        for f in 0..NUM_FILTERS {
            let kernel = &w[f * KK..(f + 1) * KK];
            let mut hi = f64::NEG_INFINITY;
            let mut lo = f64::INFINITY;
            for i in 0..CONV_OUT {
                for j in 0..CONV_OUT {
                    let r = conv_at(kernel, b[f], &patch.values, PATCH_SIZE, i, j);
                    let idx = i * CONV_OUT + j;
                    if r > hi {
                        hi = r;
                        argmax[f] = idx;
                    }
                    if r < lo {
                        lo = r;
                        argmin[f] = idx;
                    }
                }
            }
            features[f] = hi;
            features[NUM_FILTERS + f] = lo;
        }
        let (hidden_pre, output) = self.dense_head(&features);
        if !output.is_finite() || hidden_pre.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite activation in forward pass".into()));
        }
        Ok(ForwardCache {
            features,
            argmax,
            argmin,
            hidden_pre,
            output,
        })
    }

    /// fc1 + ReLU + fc2 + sigmoid on a pooled feature vector.
    fn dense_head(&self, features: &[f64; FEATURES]) -> ([f64; HIDDEN], f64) {
        let w1 = self.fc1_weights();
        let b1 = self.fc1_biases();
        let w2 = self.fc2_weights();
        let mut hidden_pre = [0.0; HIDDEN];
        let mut out = self.fc2_bias();
        for j in 0..HIDDEN {
            let row = &w1[j * FEATURES..(j + 1) * FEATURES];
            let a = b1[j] + row.iter().zip(features).map(|(w, x)| w * x).sum::<f64>();
            hidden_pre[j] = a;
            out += w2[j] * a.max(0.0);
        }
        (hidden_pre, sigmoid(out))
    }

    /// Exact gradient of `|forward(patch) - label|` with respect to every
    /// parameter. The subgradient at the absolute-value and ReLU kinks is 0.
    pub fn backprop_grads(&self, patch: &Patch32, label: f64) -> Result<Gradient> {
        let mut g = Gradient::zeros();
        self.accumulate_grads(patch, label, &mut g)?;
        Ok(g)
    }

    /// Adds this sample's gradient into `g`; returns the absolute error.
    fn accumulate_grads(&self, patch: &Patch32, label: f64, g: &mut Gradient) -> Result<f64> {
        let cache = self.forward_cached(patch)?;
        let diff = cache.output - label;
        let d_out = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            return Ok(0.0);
        };
        let d_logit = d_out * cache.output * (1.0 - cache.output);

        g.params[FC2_B] += d_logit;
        let mut d_hidden = [0.0; HIDDEN];
        for j in 0..HIDDEN {
            let a = cache.hidden_pre[j];
            if a > 0.0 {
                g.params[FC2_W + j] += d_logit * a;
                d_hidden[j] = d_logit * self.params[FC2_W + j];
            }
        }

        let mut d_feat = [0.0; FEATURES];
        for (j, &dh) in d_hidden.iter().enumerate() {
            if dh == 0.0 {
                continue;
            }
            g.params[FC1_B + j] += dh;
            let row = FC1_W + j * FEATURES;
            for k in 0..FEATURES {
                g.params[row + k] += dh * cache.features[k];
                d_feat[k] += dh * self.params[row + k];
            }
        }

        // Each pooled feature depends on exactly one response location.
        for f in 0..NUM_FILTERS {
            for (d, pos) in [
                (d_feat[f], cache.argmax[f]),
                (d_feat[NUM_FILTERS + f], cache.argmin[f]),
            ] {
                if d == 0.0 {
                    continue;
                }
                g.params[CONV_B + f] += d;
                let (i, j) = (pos / CONV_OUT, pos % CONV_OUT);
                let base = CONV_W + f * KK;
                for u in 0..KERNEL {
                    for v in 0..KERNEL {
                        g.params[base + u * KERNEL + v] += d * patch.get(j + v, i + u);
                    }
                }
            }
        }
        Ok(diff.abs())
    }
}

struct ForwardCache {
    features: [f64; FEATURES],
    argmax: [usize; NUM_FILTERS],
    argmin: [usize; NUM_FILTERS],
    hidden_pre: [f64; HIDDEN],
    output: f64,
}

/// Large logits would round to exactly 0 or 1; the score stays strictly
/// inside the unit interval.
#[inline]
fn sigmoid(x: f64) -> f64 {
    (1.0 / (1.0 + (-x).exp())).clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

/// Valid cross-correlation of one kernel at output location (i, j) of a
/// row-major `stride`-wide buffer. Shared by the per-patch and full-image
/// paths so that both accumulate in the same order.
#[inline]
fn conv_at(kernel: &[f64], bias: f64, src: &[f64], stride: usize, i: usize, j: usize) -> f64 {
    let mut acc = bias;
    for u in 0..KERNEL {
        let row = &src[(i + u) * stride + j..(i + u) * stride + j + KERNEL];
        let krow = &kernel[u * KERNEL..(u + 1) * KERNEL];
        for v in 0..KERNEL {
            acc += krow[v] * row[v];
        }
    }
    acc
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 16,
            epochs: 40,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub patch: Patch32,
    pub label: f64,
}

/// Where the patches of one blurred image came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub name: String,
    pub sigma: f64,
    pub label: f64,
    pub external_label: bool,
    pub patches: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    pub samples: Vec<Sample>,
    pub provenance: Vec<Provenance>,
    /// Source images smaller than one patch, left out.
    pub skipped: usize,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Externally supplied labels keyed by image name and blur sigma.
#[derive(Debug, Clone, Default)]
pub struct LabelTable {
    entries: HashMap<(String, u64), f64>,
}

impl LabelTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, sigma: f64, label: f64) {
        self.entries.insert((name.into(), sigma.to_bits()), label);
    }

    pub fn get(&self, name: &str, sigma: f64) -> Option<f64> {
        self.entries.get(&(name.to_string(), sigma.to_bits())).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parse `filename,sigma,label` rows. A header row is skipped when its
    /// sigma column is not numeric.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut table = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 3 {
                return Err(Error::Format(format!(
                    "label table line {}: expected filename,sigma,label",
                    lineno + 1
                )));
            }
            let (Ok(sigma), Ok(label)) = (cols[1].parse::<f64>(), cols[2].parse::<f64>()) else {
                if lineno == 0 {
                    continue;
                }
                return Err(Error::Format(format!(
                    "label table line {}: non-numeric sigma or label",
                    lineno + 1
                )));
            };
            table.insert(cols[0], sigma, label);
        }
        Ok(table)
    }

    /// Map labels affinely onto `[0, 1]` when any lies outside it (raw DMOS
    /// scores). Tables already inside the unit interval are kept verbatim.
    pub fn rescaled_to_unit(&self) -> Self {
        let (lo, hi) = self
            .entries
            .values()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        if self.entries.is_empty() || (lo >= 0.0 && hi <= 1.0) {
            return self.clone();
        }
        let span = hi - lo;
        let entries = self
            .entries
            .iter()
            .map(|(k, &v)| (k.clone(), if span > 0.0 { (v - lo) / span } else { 0.0 }))
            .collect();
        Self { entries }
    }
}

/// Blur every pristine image with every sigma, normalize, and tile into
/// non-overlapping 32x32 patches. Labels default to `sigma / max(sigmas)`.
pub fn gen_training_data(
    pristine: &[(String, GrayImage)],
    sigmas: &[f64],
    labels: Option<&LabelTable>,
) -> Result<TrainingSet> {
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(Error::Contract(format!("blur sigma {s} must be finite and >= 0")));
    }
    let sigma_max = sigmas.iter().cloned().fold(0.0, f64::max);
    let mut set = TrainingSet::default();
    for (name, img) in pristine {
        if img.width() < PATCH_SIZE || img.height() < PATCH_SIZE {
            set.skipped += 1;
            continue;
        }
        for &sigma in sigmas {
            let (label, external) = match labels {
                Some(table) => (
                    table.get(name, sigma).ok_or_else(|| {
                        Error::Contract(format!("label table has no entry for {name} at sigma {sigma}"))
                    })?,
                    true,
                ),
                None if sigma_max > 0.0 => (sigma / sigma_max, false),
                None => (0.0, false),
            };
            if !(0.0..=1.0).contains(&label) {
                return Err(Error::Contract(format!(
                    "label {label} for {name} at sigma {sigma} is outside [0, 1]"
                )));
            }
            let norm = local_normalize(&gaussian_blur(img, sigma), NORM_WINDOW);
            let mut count = 0;
            for ty in 0..img.height() / PATCH_SIZE {
                for tx in 0..img.width() / PATCH_SIZE {
                    let cx = tx * PATCH_SIZE + PATCH_CENTER;
                    let cy = ty * PATCH_SIZE + PATCH_CENTER;
                    let patch = extract_patch(&norm, cx, cy)?;
                    set.samples.push(Sample { patch, label });
                    count += 1;
                }
            }
            set.provenance.push(Provenance {
                name: name.clone(),
                sigma,
                label,
                external_label: external,
                patches: count,
            });
        }
    }
    Ok(set)
}

/// Mini-batch SGD on the mean absolute error. Returns the trained model and
/// the per-epoch mean loss (measured before each batch's update).
pub fn train(model: &QnnModel, data: &TrainingSet, hp: &HyperParams) -> Result<(QnnModel, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if !(hp.learning_rate >= 0.0) || hp.batch_size == 0 {
        return Err(Error::Contract(
            "learning rate must be >= 0 and batch size >= 1".into(),
        ));
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(hp.epochs);
    let mut grad = Gradient::zeros();
    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(hp.batch_size) {
            grad.params.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let s = &data.samples[i];
                total += model
                    .accumulate_grads(&s.patch, s.label, &mut grad)
                    .map_err(|_| Error::Diverged { epoch: epoch + 1 })?;
            }
            let step = hp.learning_rate / batch.len() as f64;
            if step != 0.0 {
                for (p, g) in model.params.iter_mut().zip(&grad.params) {
                    *p -= step * g;
                }
            }
        }
        let loss = total / data.len() as f64;
        if !loss.is_finite() || model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { epoch: epoch + 1 });
        }
        curve.push(loss);
    }
    Ok((model, curve))
}

pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in curve.iter().enumerate() {
        s.push_str(&format!("{},{}\n", i + 1, l));
    }
    s
}

// ---------------------------------------------------------------------------
// Score maps

/// Per-pixel quality score: the network applied to the 32x32 patch around
/// every pixel of the locally normalized image.
///
/// The convolution is evaluated once over the edge-padded image and pooled
/// with sliding 26x26 windows, which yields exactly the per-patch responses.
/// Work is spread over the current rayon pool.
pub fn score_map(model: &QnnModel, img: &GrayImage) -> Result<GrayImage> {
    let (w, h) = (img.width(), img.height());
    let norm = local_normalize(img, NORM_WINDOW);
    let lead = PATCH_CENTER as isize;
    let pw = w + PATCH_SIZE - 1;
    let ph = h + PATCH_SIZE - 1;
    let mut padded = Vec::with_capacity(pw * ph);
    for py in 0..ph as isize {
        for px in 0..pw as isize {
            padded.push(norm.get_clamped(px - lead, py - lead));
        }
    }
    // responses span (h + 25) x (w + 25)
    let rw = w + CONV_OUT - 1;
    let rh = h + CONV_OUT - 1;
    let weights = model.conv_weights();
    let biases = model.conv_biases();
    let pooled: Vec<(Vec<f64>, Vec<f64>)> = (0..NUM_FILTERS)
        .into_par_iter()
        .map(|f| {
            let kernel = &weights[f * KK..(f + 1) * KK];
            let mut resp = vec![0.0; rw * rh];
            for i in 0..rh {
                for j in 0..rw {
                    resp[i * rw + j] = conv_at(kernel, biases[f], &padded, pw, i, j);
                }
            }
            sliding_extrema(&resp, rw, rh, POOL)
        })
        .collect();

    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w)
        .enumerate()
        .try_for_each(|(y, row)| -> Result<()> {
            let mut features = [0.0; FEATURES];
            for (x, px) in row.iter_mut().enumerate() {
                for (f, (hi, lo)) in pooled.iter().enumerate() {
                    features[f] = hi[y * w + x];
                    features[NUM_FILTERS + f] = lo[y * w + x];
                }
                let (_, s) = model.dense_head(&features);
                if !s.is_finite() {
                    return Err(Error::Numeric(format!("non-finite score at ({x}, {y})")));
                }
                *px = s;
            }
            Ok(())
        })?;
    GrayImage::new(w, h, out)
}

/// Direct evaluation of every pixel's patch; slow, used to check
/// [`score_map`].
pub fn score_map_reference(model: &QnnModel, img: &GrayImage) -> Result<GrayImage> {
    let norm = local_normalize(img, NORM_WINDOW);
    let mut out = Vec::with_capacity(img.len());
    for y in 0..img.height() {
        for x in 0..img.width() {
            out.push(model.forward(&extract_patch(&norm, x, y)?)?);
        }
    }
    GrayImage::new(img.width(), img.height(), out)
}

/// Max and min over every `k x k` window of a `w x h` buffer; the results are
/// `(w - k + 1) x (h - k + 1)`.
fn sliding_extrema(src: &[f64], w: usize, h: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut row_hi = vec![0.0; ow * h];
    let mut row_lo = vec![0.0; ow * h];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            let win = &line[x..x + k];
            row_hi[y * ow + x] = win.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row_lo[y * ow + x] = win.iter().cloned().fold(f64::INFINITY, f64::min);
        }
    }
    let mut hi = vec![0.0; ow * oh];
    let mut lo = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut a = f64::NEG_INFINITY;
            let mut b = f64::INFINITY;
            for yy in y..y + k {
                a = a.max(row_hi[yy * ow + x]);
                b = b.min(row_lo[yy * ow + x]);
            }
            hi[y * ow + x] = a;
            lo[y * ow + x] = b;
        }
    }
    (hi, lo)
}
