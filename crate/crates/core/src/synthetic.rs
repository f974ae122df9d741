//! Procedural test imagery: textured scenes and focus masks for synthetic
//! multi-focus experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::{gaussian_blur, GrayImage};

/// Peak-to-peak amplitude of the fine grain layer.
const GRAIN_AMPLITUDE: f64 = 100.0;
const GRAIN_SIGMA: f64 = 0.7;

/// A seeded scene of mixed-frequency gratings, hard-edged rectangles, and a
/// fine grain layer, quantized to integers in `[0, 255]`.
///
/// The grain matters: real in-focus regions carry detail near the pixel
/// scale that defocus wipes out, and without it a blurred copy keeps most of
/// its edge strength.
pub fn textured_image(width: usize, height: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gratings: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let freq = rng.random_range(0.08..0.9);
            let amp = rng.random_range(10.0..30.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (theta.cos() * freq, theta.sin() * freq, amp, phase)
        })
        .collect();
    let rects: Vec<(f64, f64, f64, f64, f64)> = (0..8)
        .map(|_| {
            let x0 = rng.random_range(0.0..width as f64);
            let y0 = rng.random_range(0.0..height as f64);
            let w = rng.random_range(1.0..(width as f64 / 2.0).max(2.0));
            let h = rng.random_range(1.0..(height as f64 / 2.0).max(2.0));
            (x0, y0, w, h, rng.random_range(-50.0..50.0))
        })
        .collect();
    let noise = GrayImage::from_fn(width, height, |_, _| rng.random_range(-1.0..1.0));
    let grain = gaussian_blur(&noise, GRAIN_SIGMA);
    let (glo, ghi) = grain.min_max();
    let grain_scale = if ghi > glo { GRAIN_AMPLITUDE / (ghi - glo) } else { 0.0 };
    GrayImage::from_fn(width, height, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let mut v = 0.0;
        for &(kx, ky, amp, phase) in &gratings {
            v += amp * (kx * xf + ky * yf + phase).sin();
        }
        for &(x0, y0, w, h, delta) in &rects {
            if xf >= x0 && xf < x0 + w && yf >= y0 && yf < y0 + h {
                v += delta;
            }
        }
        let g = (grain.get(x, y) - (glo + ghi) / 2.0) * grain_scale;
        (128.0 + 0.6 * v + g).round().clamp(0.0, 255.0)
    })
}

/// Binary mask split by a straight line through the image center at angle
/// `theta` (radians); 1 on the side the normal points away from.
pub fn half_plane_mask(width: usize, height: usize, theta: f64) -> GrayImage {
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let (nx, ny) = (theta.cos(), theta.sin());
    GrayImage::from_fn(width, height, |x, y| {
        if (x as f64 - cx) * nx + (y as f64 - cy) * ny < 0.0 {
            1.0
        } else {
            0.0
        }
    })
}

/// Mask that is 1 inside a centered disk of the given radius.
pub fn disk_mask(width: usize, height: usize, cx: f64, cy: f64, radius: f64) -> GrayImage {
    GrayImage::from_fn(width, height, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        if dx * dx + dy * dy <= radius * radius {
            1.0
        } else {
            0.0
        }
    })
}
