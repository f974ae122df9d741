//! Weight normalization, weighted-sum fusion, and the end-to-end pipeline.

use std::fmt;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::focus::{confidence_map, pre_estimate, DEFAULT_THRESHOLD};
use crate::image::{
    check_same_shape, gaussian_blur, save_f32map, save_pgm, GrayImage,
};
use crate::qnn::{score_map, QnnModel};
use crate::solver::{solve_with_block_motion, SolverParams};

/// Tolerance on the per-pixel sum of fusion weights.
pub const PARTITION_TOL: f64 = 1e-6;

/// Sigmoid applied to the sum-normalized weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSigmoid {
    pub mean: f64,
    pub slope: f64,
}

impl Default for WeightSigmoid {
    fn default() -> Self {
        Self {
            mean: 0.5,
            slope: 40.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineParams {
    pub solver: SolverParams,
    pub threshold: f64,
    pub sigmoid: WeightSigmoid,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            solver: SolverParams::default(),
            threshold: DEFAULT_THRESHOLD,
            sigmoid: WeightSigmoid::default(),
        }
    }
}

/// Per pixel: divide by the sum over sources (uniform `1/N` if the sum is
/// zero), squash with the sigmoid, and divide by the sum again so the
/// weights stay a partition of unity.
pub fn normalize_weights(raw: &[GrayImage], sigmoid: &WeightSigmoid) -> Result<Vec<GrayImage>> {
    if raw.len() < 2 {
        return Err(Error::Contract("need at least two weight maps".into()));
    }
    check_same_shape(&raw.iter().collect::<Vec<_>>(), "weight map")?;
    let n = raw.len();
    let mut out = raw.to_vec();
    let mut w = vec![0.0; n];
    for p in 0..raw[0].len() {
        let total: f64 = raw.iter().map(|m| m.data()[p]).sum();
        for (i, m) in raw.iter().enumerate() {
            w[i] = if total > 0.0 {
                m.data()[p] / total
            } else {
                1.0 / n as f64
            };
        }
        for v in w.iter_mut() {
            *v = 1.0 / (1.0 + (-sigmoid.slope * (*v - sigmoid.mean)).exp());
        }
        let total: f64 = w.iter().sum();
        for (i, m) in out.iter_mut().enumerate() {
            m.data_mut()[p] = w[i] / total;
        }
    }
    Ok(out)
}

/// Pixel-wise `sum_i W_i * I_i`, clamped to `[0, 255]`.
pub fn fuse(images: &[GrayImage], weights: &[GrayImage]) -> Result<GrayImage> {
    if images.is_empty() || images.len() != weights.len() {
        return Err(Error::Contract(format!(
            "{} images but {} weight maps",
            images.len(),
            weights.len()
        )));
    }
    let all: Vec<&GrayImage> = images.iter().chain(weights).collect();
    check_same_shape(&all, "fusion input")?;
    let (w, h) = (images[0].width(), images[0].height());
    let mut out = Vec::with_capacity(w * h);
    for p in 0..w * h {
        let total: f64 = weights.iter().map(|m| m.data()[p]).sum();
        if (total - 1.0).abs() > PARTITION_TOL {
            return Err(Error::Contract(format!(
                "weights sum to {total} at pixel ({}, {})",
                p % w,
                p / w
            )));
        }
        let v: f64 = images
            .iter()
            .zip(weights)
            .map(|(img, wt)| img.data()[p] * wt.data()[p])
            .sum();
        out.push(v.clamp(0.0, 255.0));
    }
    GrayImage::new(w, h, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Score,
    PreEstimate,
    Confidence,
    Smooth,
    Normalize,
    Fuse,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Score => "score",
            Stage::PreEstimate => "pre-estimate",
            Stage::Confidence => "confidence",
            Stage::Smooth => "smooth",
            Stage::Normalize => "normalize",
            Stage::Fuse => "fuse",
        })
    }
}

#[derive(Debug, Clone)]
pub struct FusionResult {
    pub fused: GrayImage,
    pub scores: Vec<GrayImage>,
    pub masks: Vec<GrayImage>,
    pub confidence: GrayImage,
    pub smoothed: Vec<GrayImage>,
    pub weights: Vec<GrayImage>,
    /// One flag per source: every block-motion solve reached tolerance.
    pub converged: Vec<bool>,
    /// One line per solve: source, offset, vertices, iterations, residual.
    pub solver_log: Vec<String>,
    pub timings: Vec<(Stage, Duration)>,
}

fn staged<T>(stage: Stage, timings: &mut Vec<(Stage, Duration)>, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| Error::Stage {
        stage,
        source: Box::new(e),
    })?;
    timings.push((stage, start.elapsed()));
    Ok(out)
}

/// Score, pre-estimate, confidence, smooth (each mask guided by its own
/// source), normalize, fuse. Per-source stages run on the current rayon
/// pool.
pub fn run_pipeline(
    images: &[GrayImage],
    model: &QnnModel,
    params: &PipelineParams,
) -> Result<FusionResult> {
    if images.len() < 2 {
        return Err(Error::Contract(format!(
            "need at least two source images, got {}",
            images.len()
        )));
    }
    check_same_shape(&images.iter().collect::<Vec<_>>(), "source image")?;
    params.solver.validate()?;
    let mut timings = Vec::new();

    let scores: Vec<GrayImage> = staged(Stage::Score, &mut timings, || {
        images.par_iter().map(|img| score_map(model, img)).collect()
    })?;
    let masks = staged(Stage::PreEstimate, &mut timings, || pre_estimate(&scores))?;
    let confidence = staged(Stage::Confidence, &mut timings, || {
        confidence_map(&scores, params.threshold)
    })?;
    let solved = staged(Stage::Smooth, &mut timings, || {
        masks
            .par_iter()
            .zip(images.par_iter())
            .map(|(mask, img)| solve_with_block_motion(mask, &confidence, img, &params.solver))
            .collect::<Result<Vec<_>>>()
    })?;
    let weights = staged(Stage::Normalize, &mut timings, || {
        normalize_weights(
            &solved.iter().map(|s| s.map.clone()).collect::<Vec<_>>(),
            &params.sigmoid,
        )
    })?;
    let fused = staged(Stage::Fuse, &mut timings, || fuse(images, &weights))?;

    let converged = solved.iter().map(|s| s.converged()).collect();
    let solver_log = solved
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.solves.iter().map(move |sol| format!("source={} {sol}", i + 1)))
        .collect();
    Ok(FusionResult {
        fused,
        scores,
        masks,
        confidence,
        smoothed: solved.into_iter().map(|s| s.map).collect(),
        weights,
        converged,
        solver_log,
        timings,
    })
}

impl FusionResult {
    /// Write every intermediate under `dir` with fixed names; maps are
    /// numbered from 1.
    pub fn dump(&self, dir: impl AsRef<Path>, sources: &[GrayImage]) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, m) in self.scores.iter().enumerate() {
            save_f32map(m, dir.join(format!("score_{}.f32map", i + 1)))?;
        }
        for (i, m) in self.masks.iter().enumerate() {
            save_f32map(m, dir.join(format!("mask_{}.f32map", i + 1)))?;
        }
        save_f32map(&self.confidence, dir.join("confidence.f32map"))?;
        for (i, m) in self.smoothed.iter().enumerate() {
            save_f32map(m, dir.join(format!("wprime_{}.f32map", i + 1)))?;
        }
        for (i, m) in self.weights.iter().enumerate() {
            save_f32map(m, dir.join(format!("weight_{}.f32map", i + 1)))?;
        }
        save_pgm(&self.fused, dir.join("fused.pgm"))?;
        let (lo, hi) = diff_range(&self.fused, sources);
        if hi > lo {
            for (i, src) in sources.iter().enumerate() {
                save_pgm(
                    &diff_map(&self.fused, src, lo, hi)?,
                    dir.join(format!("diff_{}.pgm", i + 1)),
                )?;
            }
        }
        Ok(())
    }
}

/// Blur `sharp` and swap the in-focus and blurred regions between two
/// outputs: `I1` is sharp where `mask` is 1, `I2` where it is 0. The third
/// output is the sharp ground truth.
pub fn make_multifocus_pair(
    sharp: &GrayImage,
    mask: &GrayImage,
    sigma_blur: f64,
) -> Result<(GrayImage, GrayImage, GrayImage)> {
    check_same_shape(&[sharp, mask], "mask")?;
    if !(sigma_blur >= 0.0 && sigma_blur.is_finite()) {
        return Err(Error::Contract(format!("blur sigma {sigma_blur} must be >= 0")));
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::Contract("focus mask must be binary".into()));
    }
    let blurred = gaussian_blur(sharp, sigma_blur);
    let pick = |first: &GrayImage, second: &GrayImage| {
        GrayImage::from_fn(sharp.width(), sharp.height(), |x, y| {
            if mask.get(x, y) == 1.0 {
                first.get(x, y)
            } else {
                second.get(x, y)
            }
        })
    };
    Ok((pick(sharp, &blurred), pick(&blurred, sharp), sharp.clone()))
}

/// Global extrema of `fused - source_i` over all sources, for a shared
/// difference-map scale.
pub fn diff_range(fused: &GrayImage, sources: &[GrayImage]) -> (f64, f64) {
    sources.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
        fused
            .data()
            .iter()
            .zip(s.data())
            .fold((lo, hi), |(lo, hi), (f, i)| (lo.min(f - i), hi.max(f - i)))
    })
}

/// `(F - I - lo) / (hi - lo)` scaled to `[0, 255]`.
pub fn diff_map(fused: &GrayImage, source: &GrayImage, lo: f64, hi: f64) -> Result<GrayImage> {
    check_same_shape(&[fused, source], "difference input")?;
    if !(hi > lo) {
        return Err(Error::Contract(format!("degenerate difference range [{lo}, {hi}]")));
    }
    let data = fused
        .data()
        .iter()
        .zip(source.data())
        .map(|(f, i)| 255.0 * (f - i - lo) / (hi - lo))
        .collect();
    GrayImage::new(fused.width(), fused.height(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_weights_stay_equal() {
        let raw = [GrayImage::filled(2, 2, 0.7), GrayImage::filled(2, 2, 0.7)];
        let w = normalize_weights(&raw, &WeightSigmoid::default()).unwrap();
        assert!(w.iter().all(|m| m.data().iter().all(|&v| v == 0.5)));
    }

    #[test]
    fn one_zero_weights_follow_two_sigmoids() {
        let raw = [GrayImage::filled(1, 1, 1.0), GrayImage::filled(1, 1, 0.0)];
        let w = normalize_weights(&raw, &WeightSigmoid::default()).unwrap();
        let s1 = 1.0 / (1.0 + (-20.0f64).exp());
        let s2 = 1.0 / (1.0 + 20.0f64.exp());
        assert!((w[0].get(0, 0) - s1 / (s1 + s2)).abs() < 1e-15);
        assert!((w[0].get(0, 0) - (1.0 - 2.0e-9)).abs() < 1e-10);
        assert!((w[0].get(0, 0) + w[1].get(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn all_zero_pixel_is_uniform() {
        let raw = vec![GrayImage::filled(2, 1, 0.0); 3];
        let w = normalize_weights(&raw, &WeightSigmoid::default()).unwrap();
        for m in &w {
            assert!(m.data().iter().all(|&v| v == 1.0 / 3.0));
        }
    }

    #[test]
    fn unit_weight_selects_source() {
        let a = GrayImage::from_fn(4, 3, |x, y| (x * 10 + y) as f64);
        let b = GrayImage::filled(4, 3, 200.0);
        let w = [GrayImage::filled(4, 3, 1.0), GrayImage::filled(4, 3, 0.0)];
        assert_eq!(fuse(&[a.clone(), b], &w).unwrap(), a);
    }

    #[test]
    fn uniform_weights_average() {
        let a = GrayImage::filled(2, 2, 10.0);
        let b = GrayImage::filled(2, 2, 30.0);
        let w = vec![GrayImage::filled(2, 2, 0.5); 2];
        assert!(fuse(&[a, b], &w).unwrap().data().iter().all(|&v| v == 20.0));
    }

    #[test]
    fn broken_partition_rejected() {
        let a = GrayImage::filled(2, 2, 10.0);
        let w = vec![GrayImage::filled(2, 2, 0.6); 2];
        assert!(matches!(fuse(&[a.clone(), a], &w), Err(Error::Contract(_))));
    }

    #[test]
    fn full_mask_pair() {
        let sharp = GrayImage::from_fn(16, 16, |x, y| ((x * 40 + y * 17) % 256) as f64);
        let mask = GrayImage::filled(16, 16, 1.0);
        let (i1, i2, gt) = make_multifocus_pair(&sharp, &mask, 2.0).unwrap();
        assert_eq!(i1, sharp);
        assert_eq!(i2, gaussian_blur(&sharp, 2.0));
        assert_eq!(gt, sharp);
    }

    #[test]
    fn zero_blur_pair_is_identity() {
        let sharp = GrayImage::from_fn(8, 8, |x, y| (x * y) as f64);
        let mask = GrayImage::from_fn(8, 8, |x, _| if x < 4 { 1.0 } else { 0.0 });
        let (i1, i2, _) = make_multifocus_pair(&sharp, &mask, 0.0).unwrap();
        assert_eq!(i1, sharp);
        assert_eq!(i2, sharp);
    }

    #[test]
    fn non_binary_mask_rejected() {
        let sharp = GrayImage::filled(4, 4, 1.0);
        let mask = GrayImage::filled(4, 4, 0.5);
        assert!(make_multifocus_pair(&sharp, &mask, 1.0).is_err());
    }

    #[test]
    fn zero_difference_sits_mid_scale() {
        let f = GrayImage::from_fn(3, 3, |x, y| (x + y) as f64);
        let d = diff_map(&f, &f, -10.0, 10.0).unwrap();
        assert!(d.data().iter().all(|&v| v == 127.5));
        assert!(d.to_u8().iter().all(|&v| v == 128));
    }

    #[test]
    fn difference_endpoints() {
        let f = GrayImage::new(2, 1, vec![10.0, 0.0]).unwrap();
        let i = GrayImage::new(2, 1, vec![0.0, 5.0]).unwrap();
        let d = diff_map(&f, &i, -5.0, 10.0).unwrap();
        assert_eq!(d.data(), &[255.0, 0.0]);
        assert!(diff_map(&f, &i, 1.0, 1.0).is_err());
    }
}
