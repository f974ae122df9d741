//! Grayscale raster container, file formats, and the per-pixel preprocessing
//! shared by the quality network and the solver.
//!
//! Intensities are kept as `f64` on the nominal 8-bit scale `[0, 255]`;
//! quantization back to bytes happens only when writing a PGM.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Side length of a network input patch.
pub const PATCH_SIZE: usize = 32;
/// Offset of the patch center from its top-left corner. The center sits at
/// element (17, 17) counting from one.
pub const PATCH_CENTER: usize = 16;
/// Added to the local standard deviation before dividing.
pub const NORMALIZE_EPS: f64 = 1.0;

const F32MAP_MAGIC: &[u8; 8] = b"F32MAP\0\0";

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite pixel at index {i}")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Image with every pixel set to `value`.
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Sample with edge replication for out-of-range coordinates.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    pub fn same_shape(&self, other: &GrayImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Mirror left to right.
    pub fn flip_horizontal(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            self.get(self.width - 1 - x, y)
        })
    }

    /// Round to the nearest integer and clamp into `[0, 255]`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub(crate) fn check_same_shape(images: &[&GrayImage], what: &str) -> Result<()> {
    if let Some(first) = images.first() {
        for (i, img) in images.iter().enumerate().skip(1) {
            if !first.same_shape(img) {
                return Err(Error::Shape(format!(
                    "{what} {i} is {}x{}, expected {}x{}",
                    img.width, img.height, first.width, first.height
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// File formats

/// Load an 8-bit binary PGM (P5) or an 8-bit grayscale/RGB PNG.
///
/// RGB input is reduced to luma with weights 0.299, 0.587, 0.114 and rounded
/// to the nearest integer.
pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "empty file"),
        ));
    }
    decode_gray(&bytes)
}

pub fn decode_gray(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.starts_with(b"P5") {
        decode_pgm(bytes)
    } else if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else {
        Err(Error::Format("expected a P5 PGM or PNG file".into()))
    }
}

fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed PGM header".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("PGM maxval {maxval} is not 8-bit")));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Format("malformed PGM header".into()));
    }
    pos += 1;
    let n = width * height;
    let pixels = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::Format("truncated PGM data".into()))?;
    GrayImage::new(width, height, pixels.iter().map(|&b| b as f64).collect())
}

fn decode_png(bytes: &[u8]) -> Result<GrayImage> {
    use image::{DynamicImage, ImageFormat};
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Format(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(f64::from).collect(),
        DynamicImage::ImageLumaA8(buf) => buf.pixels().map(|p| p.0[0] as f64).collect(),
        DynamicImage::ImageRgb8(buf) => buf.pixels().map(|p| luma(p.0[0], p.0[1], p.0[2])).collect(),
        DynamicImage::ImageRgba8(buf) => buf.pixels().map(|p| luma(p.0[0], p.0[1], p.0[2])).collect(),
        other => {
            return Err(Error::Format(format!(
                "unsupported PNG color type {:?}",
                other.color()
            )))
        }
    };
    GrayImage::new(w, h, data)
}

#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> f64 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round()
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_u8());
    out
}

/// Write as an 8-bit binary PGM, rounding and clamping each pixel.
pub fn save_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

/// Write a `[0, 1]` map as a PGM scaled by 255.
pub fn save_unit_map_pgm(map: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    save_pgm(&map.map(|v| v * 255.0), path)
}

pub fn encode_f32map(img: &GrayImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * img.len());
    out.extend_from_slice(F32MAP_MAGIC);
    out.extend_from_slice(&(img.width as u32).to_le_bytes());
    out.extend_from_slice(&(img.height as u32).to_le_bytes());
    for &v in &img.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_f32map(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 16 || &bytes[..8] != F32MAP_MAGIC {
        return Err(Error::Format("missing F32MAP header".into()));
    }
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != 4 * width * height {
        return Err(Error::Format(format!(
            "F32MAP body has {} bytes, expected {}",
            body.len(),
            4 * width * height
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    GrayImage::new(width, height, data)
}

pub fn save_f32map(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_f32map(img))
        .map_err(|e| Error::io(path, e))
}

pub fn load_f32map(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_f32map(&bytes)
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Subtract the local mean and divide by the local population standard
/// deviation plus [`NORMALIZE_EPS`], over a `window x window` neighborhood
/// with edge replication.
pub fn local_normalize(img: &GrayImage, window: usize) -> GrayImage {
    assert!(window % 2 == 1, "normalization window must be odd");
    let r = (window / 2) as isize;
    let count = (window * window) as f64;
    let mut out = Vec::with_capacity(img.len());
    let mut window_vals = Vec::with_capacity(window * window);
    for y in 0..img.height as isize {
        for x in 0..img.width as isize {
            window_vals.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    window_vals.push(img.get_clamped(x + dx, y + dy));
                }
            }
            let first = window_vals[0];
            if window_vals.iter().all(|&v| v == first) {
                out.push(0.0);
                continue;
            }
            let mean = window_vals.iter().sum::<f64>() / count;
            let var = window_vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let center = img.get(x as usize, y as usize);
            out.push((center - mean) / (var.sqrt() + NORMALIZE_EPS));
        }
    }
    GrayImage {
        width: img.width,
        height: img.height,
        data: out,
    }
}

/// A 32x32 network input cut from a normalized image.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch32 {
    pub values: Vec<f64>,
    pub center: (usize, usize),
}

impl Patch32 {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.len() != PATCH_SIZE * PATCH_SIZE {
            return Err(Error::Shape(format!(
                "patch needs {} values, got {}",
                PATCH_SIZE * PATCH_SIZE,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite patch value".into()));
        }
        Ok(Self {
            values,
            center: (PATCH_CENTER, PATCH_CENTER),
        })
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * PATCH_SIZE + col]
    }
}

/// The 32x32 window covering rows `y-16..=y+15` and columns `x-16..=x+15`,
/// replicating edge pixels where the window leaves the image.
pub fn extract_patch(norm: &GrayImage, x: usize, y: usize) -> Result<Patch32> {
    if x >= norm.width || y >= norm.height {
        return Err(Error::Bounds {
            x,
            y,
            width: norm.width,
            height: norm.height,
        });
    }
    let x0 = x as isize - PATCH_CENTER as isize;
    let y0 = y as isize - PATCH_CENTER as isize;
    let mut values = Vec::with_capacity(PATCH_SIZE * PATCH_SIZE);
    for row in 0..PATCH_SIZE as isize {
        for col in 0..PATCH_SIZE as isize {
            values.push(norm.get_clamped(x0 + col, y0 + row));
        }
    }
    Ok(Patch32 {
        values,
        center: (x, y),
    })
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`. `sigma = 0`
/// yields the identity kernel `[1.0]`.
pub fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    assert!(sigma >= 0.0 && sigma.is_finite(), "sigma must be finite and >= 0");
    if sigma == 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable circular-symmetric Gaussian blur with edge replication.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    let k = gaussian_kernel_1d(sigma);
    if k.len() == 1 {
        return img.clone();
    }
    let r = (k.len() / 2) as isize;
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, &kv)| kv * img.get_clamped(x as isize + i as isize - r, y as isize))
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, &kv)| {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    kv * tmp[yy * w + x]
                })
                .sum();
        }
    }
    GrayImage {
        width: w,
        height: h,
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_normalizes_to_zero() {
        let img = GrayImage::filled(9, 5, 137.0);
        assert!(local_normalize(&img, 7).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_center_matches_window_statistics() {
        let mut img = GrayImage::filled(7, 7, 0.0);
        img.set(3, 3, 255.0);
        let norm = local_normalize(&img, 7);
        // brute force over the 49 samples of the centered window
        let samples: Vec<f64> = img.data().to_vec();
        let mean = samples.iter().sum::<f64>() / 49.0;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 49.0;
        let expected = (255.0 - 255.0 / 49.0) / (var.sqrt() + 1.0);
        assert!((norm.get(3, 3) - expected).abs() < 1e-12);
    }

    #[test]
    fn step_edge_is_antisymmetric_away_from_borders() {
        // vertical edge between columns 7 and 8, left 0, right 100
        let img = GrayImage::from_fn(16, 16, |x, _| if x < 8 { 0.0 } else { 100.0 });
        let norm = local_normalize(&img, 7);
        for y in 0..16 {
            for d in 0..3 {
                let left = norm.get(7 - d, y);
                let right = norm.get(8 + d, y);
                assert!((left + right).abs() < 1e-12, "y={y} d={d}");
                assert!(left < 0.0 && right > 0.0);
            }
        }
    }

    #[test]
    fn patch_matches_prepadded_slice() {
        let img = GrayImage::from_fn(40, 35, |x, y| (x * 7 + y * 13 % 11) as f64);
        let pad = 16;
        let pw = img.width() + 2 * pad;
        let ph = img.height() + 2 * pad;
        let padded = GrayImage::from_fn(pw, ph, |x, y| {
            img.get_clamped(x as isize - pad as isize, y as isize - pad as isize)
        });
        for &(x, y) in &[(0, 0), (1, 1), (39, 34), (20, 17), (5, 30)] {
            let p = extract_patch(&img, x, y).unwrap();
            for row in 0..32 {
                for col in 0..32 {
                    assert_eq!(p.get(col, row), padded.get(x + col, y + row));
                }
            }
            // center element (17,17) counting from one
            assert_eq!(p.get(16, 16), img.get(x, y));
        }
    }

    #[test]
    fn interior_patch_uses_no_replication() {
        let img = GrayImage::from_fn(64, 64, |x, y| (x + 64 * y) as f64);
        let p = extract_patch(&img, 20, 20).unwrap();
        assert_eq!(p.get(0, 0), img.get(4, 4));
        assert_eq!(p.get(31, 31), img.get(35, 35));
    }

    #[test]
    fn corner_patch_replicates_first_row_and_column() {
        let img = GrayImage::from_fn(64, 64, |x, y| (x + 64 * y) as f64);
        let p = extract_patch(&img, 1, 1).unwrap();
        // rows/columns -15..-1 replicate index 0
        assert_eq!(p.get(0, 0), img.get(0, 0));
        assert_eq!(p.get(14, 0), img.get(0, 0));
        assert_eq!(p.get(15, 15), img.get(0, 0));
        assert_eq!(p.get(16, 16), img.get(1, 1));
        assert_eq!(p.get(17, 0), img.get(2, 0));
    }

    #[test]
    fn patch_out_of_bounds() {
        let img = GrayImage::filled(4, 4, 0.0);
        assert!(matches!(extract_patch(&img, 4, 0), Err(Error::Bounds { .. })));
    }

    #[test]
    fn gaussian_impulse_matches_closed_form() {
        let sigma = 1.7;
        let mut img = GrayImage::filled(21, 21, 0.0);
        img.set(10, 10, 1.0);
        let out = gaussian_blur(&img, sigma);
        let r = (3.0 * sigma).ceil() as i64;
        let mut total = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                total += (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            }
        }
        for y in 0..21i64 {
            for x in 0..21i64 {
                let (dx, dy) = (x - 10, y - 10);
                let expected = if dx.abs() <= r && dy.abs() <= r {
                    (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp() / total
                } else {
                    0.0
                };
                assert!((out.get(x as usize, y as usize) - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_sigma_blur_is_identity() {
        let img = GrayImage::from_fn(5, 4, |x, y| (x * y) as f64);
        assert_eq!(gaussian_blur(&img, 0.0), img);
    }

    #[test]
    fn rgb_luma_rounds() {
        assert_eq!(luma(255, 0, 0), 76.0);
    }

    #[test]
    fn f32map_header_layout() {
        let img = GrayImage::from_fn(3, 2, |x, y| x as f64 + 0.5 * y as f64);
        let bytes = encode_f32map(&img);
        assert_eq!(&bytes[..8], b"F32MAP\0\0");
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(decode_f32map(&bytes).unwrap(), img);
    }

    #[test]
    fn rejects_16bit_pgm() {
        let mut bytes = b"P5\n2 1\n65535\n".to_vec();
        bytes.extend([0, 0, 0, 0]);
        assert!(matches!(decode_gray(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn pgm_header_comments() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([7, 9]);
        let img = decode_gray(&bytes).unwrap();
        assert_eq!(img.data(), &[7.0, 9.0]);
    }
}
