//! Binary pre-estimation masks and the shared confidence map derived from
//! per-source quality scores.

use crate::error::{Error, Result};
use crate::image::{check_same_shape, GrayImage};

pub const DEFAULT_THRESHOLD: f64 = 0.1;
pub const LOW_CONFIDENCE: f64 = 0.1;
pub const HIGH_CONFIDENCE: f64 = 1.0;

fn check_inputs(maps: &[GrayImage]) -> Result<()> {
    if maps.len() < 2 {
        return Err(Error::Contract(format!(
            "need at least two score maps, got {}",
            maps.len()
        )));
    }
    check_same_shape(&maps.iter().collect::<Vec<_>>(), "score map")
}

/// One mask per source; `masks[i]` is 1 where source `i` has the lowest
/// (best) score. Ties go to the lowest index.
pub fn pre_estimate(score_maps: &[GrayImage]) -> Result<Vec<GrayImage>> {
    check_inputs(score_maps)?;
    let (w, h) = (score_maps[0].width(), score_maps[0].height());
    let mut masks = vec![GrayImage::filled(w, h, 0.0); score_maps.len()];
    for p in 0..w * h {
        let mut best = 0;
        for (i, s) in score_maps.iter().enumerate().skip(1) {
            if s.data()[p] < score_maps[best].data()[p] {
                best = i;
            }
        }
        masks[best].data_mut()[p] = 1.0;
    }
    Ok(masks)
}

/// Confidence shared by all sources: the per-pixel score spread
/// `max_i S_i - min_i S_i`, rescaled to `[0, 1]` over the image, then
/// thresholded to 0.1 below `thr` and 1.0 otherwise. A spread that is
/// constant over the image rescales to all zeros.
pub fn confidence_map(score_maps: &[GrayImage], thr: f64) -> Result<GrayImage> {
    check_inputs(score_maps)?;
    let (w, h) = (score_maps[0].width(), score_maps[0].height());
    let spread: Vec<f64> = (0..w * h)
        .map(|p| {
            let (lo, hi) = score_maps.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                let v = s.data()[p];
                (lo.min(v), hi.max(v))
            });
            hi - lo
        })
        .collect();
    let (lo, hi) = spread
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let data = spread
        .iter()
        .map(|&d| {
            let scaled = if range > 0.0 { (d - lo) / range } else { 0.0 };
            if scaled < thr {
                LOW_CONFIDENCE
            } else {
                HIGH_CONFIDENCE
            }
        })
        .collect();
    GrayImage::new(w, h, data)
}
