//! Objective fusion metrics: gradient-based edge preservation (Q_G),
//! normalized mutual information (Q_NMI), nonlinear correlation information
//! entropy (NCIE), and PSNR.
//!
//! Histograms are taken over pixels rounded to the nearest integer in
//! `[0, 255]`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::Result;
use crate::image::{check_same_shape, quantize, GrayImage};

/// Edge-strength preservation sigmoid constants.
pub const GAMMA_G: f64 = 0.9994;
pub const KAPPA_G: f64 = -15.0;
pub const SIGMA_G: f64 = 0.5;
/// Orientation preservation sigmoid constants.
pub const GAMMA_A: f64 = 0.9879;
pub const KAPPA_A: f64 = -22.0;
pub const SIGMA_A: f64 = 0.8;

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

const BINS: usize = 256;

struct Gradients {
    magnitude: Vec<f64>,
    angle: Vec<f64>,
}

fn sobel(img: &GrayImage) -> Gradients {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let mut magnitude = Vec::with_capacity(img.len());
    let mut angle = Vec::with_capacity(img.len());
    for y in 0..h {
        for x in 0..w {
            let p = |dx: isize, dy: isize| img.get_clamped(x + dx, y + dy);
            let right = p(1, -1) + 2.0 * p(1, 0) + p(1, 1);
            let left = p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1);
            let below = p(-1, 1) + 2.0 * p(0, 1) + p(1, 1);
            let above = p(-1, -1) + 2.0 * p(0, -1) + p(1, -1);
            let gx = right - left;
            let gy = below - above;
            magnitude.push((gx * gx + gy * gy).sqrt());
            angle.push(if gx == 0.0 && gy == 0.0 {
                0.0
            } else {
                (gy / gx).atan()
            });
        }
    }
    Gradients { magnitude, angle }
}

/// Per-pixel edge preservation of `source` in `fused`.
fn preservation(source: &Gradients, fused: &Gradients) -> Vec<f64> {
    source
        .magnitude
        .iter()
        .zip(&fused.magnitude)
        .zip(source.angle.iter().zip(&fused.angle))
        .map(|((&ga, &gf), (&aa, &af))| {
            let strength = if ga.max(gf) > 0.0 { ga.min(gf) / ga.max(gf) } else { 0.0 };
            // Orientations live modulo pi: +pi/2 and -pi/2 are the same edge.
            let d = (aa - af).abs();
            let orient = 1.0 - d.min(PI - d) / FRAC_PI_2;
            preservation_model(strength, orient)
        })
        .collect()
}

/// Product of the edge-strength and orientation preservation sigmoids.
pub fn preservation_model(strength_ratio: f64, orientation: f64) -> f64 {
    let qg = GAMMA_G / (1.0 + (KAPPA_G * (strength_ratio - SIGMA_G)).exp());
    let qa = GAMMA_A / (1.0 + (KAPPA_A * (orientation - SIGMA_A)).exp());
    qg * qa
}

/// Gradient-magnitude-weighted edge preservation from both sources into
/// `fused`.
pub fn q_g(a: &GrayImage, b: &GrayImage, fused: &GrayImage) -> Result<f64> {
    check_same_shape(&[a, b, fused], "metric input")?;
    let gf = sobel(fused);
    let mut num = 0.0;
    let mut den = 0.0;
    for src in [a, b] {
        let gs = sobel(src);
        let q = preservation(&gs, &gf);
        for (qv, &tau) in q.iter().zip(&gs.magnitude) {
            num += qv * tau;
            den += tau;
        }
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

fn histogram(img: &GrayImage) -> Vec<u64> {
    let mut h = vec![0u64; BINS];
    for &v in img.data() {
        h[quantize(v) as usize] += 1;
    }
    h
}

fn joint_histogram(a: &GrayImage, b: &GrayImage) -> Vec<u64> {
    let mut h = vec![0u64; BINS * BINS];
    for (&x, &y) in a.data().iter().zip(b.data()) {
        h[quantize(x) as usize * BINS + quantize(y) as usize] += 1;
    }
    h
}

/// Entropy in bits; empty bins contribute nothing. Bins are visited in
/// index order so a joint histogram of an image with itself sums exactly the
/// same terms as the marginal.
fn entropy(counts: &[u64], total: u64) -> f64 {
    let t = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            -p * p.log2()
        })
        .sum()
}

/// `(H(a), H(b), H(a, b))` in bits.
fn entropies(a: &GrayImage, b: &GrayImage) -> (f64, f64, f64) {
    let n = a.len() as u64;
    (
        entropy(&histogram(a), n),
        entropy(&histogram(b), n),
        entropy(&joint_histogram(a, b), n),
    )
}

/// `2 MI(a, b) / (H(a) + H(b))`, or 0 if both are constant.
fn normalized_mi(a: &GrayImage, b: &GrayImage) -> f64 {
    let (ha, hb, hab) = entropies(a, b);
    if ha + hb > 0.0 {
        2.0 * (ha + hb - hab) / (ha + hb)
    } else {
        0.0
    }
}

pub fn mutual_information(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    check_same_shape(&[a, b], "metric input")?;
    let (ha, hb, hab) = entropies(a, b);
    Ok(ha + hb - hab)
}

pub fn q_nmi(a: &GrayImage, b: &GrayImage, fused: &GrayImage) -> Result<f64> {
    check_same_shape(&[a, b, fused], "metric input")?;
    Ok(normalized_mi(a, fused) + normalized_mi(b, fused))
}

/// Nonlinear correlation coefficient between two images: mutual
/// information over the mean marginal entropy, from 256-bin histograms.
/// Identical non-constant images give exactly 1.
pub fn nonlinear_correlation(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    check_same_shape(&[a, b], "metric input")?;
    Ok(normalized_mi(a, b))
}

/// NCIE over the sources and the fused image (`K = N + 1` variables).
pub fn ncie(sources: &[GrayImage], fused: &GrayImage) -> Result<f64> {
    let vars: Vec<&GrayImage> = sources.iter().chain(std::iter::once(fused)).collect();
    check_same_shape(&vars, "metric input")?;
    let k = vars.len();
    let mut r = DMatrix::identity(k, k);
    for i in 0..k {
        for j in i + 1..k {
            let c = normalized_mi(vars[i], vars[j]);
            r[(i, j)] = c;
            r[(j, i)] = c;
        }
    }
    Ok(ncie_from_correlation(&r))
}

/// `1 + sum_k (l_k / K) log_256(l_k / K)` over the eigenvalues `l_k` of the
/// symmetric correlation matrix. Round-off negative eigenvalues count as 0.
pub fn ncie_from_correlation(r: &DMatrix<f64>) -> f64 {
    let k = r.nrows() as f64;
    let eig = SymmetricEigen::new(r.clone());
    let ln256 = (BINS as f64).ln();
    1.0 + eig
        .eigenvalues
        .iter()
        .map(|&l| l / k)
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln() / ln256)
        .sum::<f64>()
}

/// `10 log10(255^2 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    check_same_shape(&[a, b], "metric input")?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_CAP_DB))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub name: String,
    pub q_g: f64,
    pub q_nmi: f64,
    pub ncie: f64,
    pub psnr_vs_gt: Option<f64>,
}

/// All metrics for one two-source fusion.
pub fn evaluate(
    name: impl Into<String>,
    a: &GrayImage,
    b: &GrayImage,
    fused: &GrayImage,
    ground_truth: Option<&GrayImage>,
) -> Result<MetricsReport> {
    Ok(MetricsReport {
        name: name.into(),
        q_g: q_g(a, b, fused)?,
        q_nmi: q_nmi(a, b, fused)?,
        ncie: ncie(&[a.clone(), b.clone()], fused)?,
        psnr_vs_gt: ground_truth.map(|gt| psnr(fused, gt)).transpose()?,
    })
}

impl MetricsReport {
    pub fn csv_header(with_psnr: bool) -> &'static str {
        if with_psnr {
            "name,q_g,q_nmi,ncie,psnr"
        } else {
            "name,q_g,q_nmi,ncie"
        }
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{:.6},{:.6},{:.6}", self.name, self.q_g, self.q_nmi, self.ncie);
        if let Some(p) = self.psnr_vs_gt {
            let _ = write!(s, ",{p:.4}");
        }
        s
    }
}

/// Method rows against the three metric columns.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<width$}  {:>8}  {:>8}  {:>8}\n", "Method", "Q_G", "Q_NMI", "NCIE");
    for r in reports {
        let _ = writeln!(
            s,
            "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}",
            r.name, r.q_g, r.q_nmi, r.ncie
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| {
            let v = 128.0 + 60.0 * ((x as f64) * 0.7).sin() + 50.0 * ((y as f64) * 0.45 + x as f64 * 0.1).cos();
            v.round()
        })
    }

    #[test]
    fn near_vertical_gradients_wrap_orientation() {
        // Both images have almost purely vertical gradients; the tiny
        // horizontal slopes of opposite sign put atan at about +pi/2 and
        // -pi/2, which is the same edge orientation.
        let a = GrayImage::from_fn(20, 20, |x, y| 10.0 * y as f64 + 0.01 * x as f64);
        let f = GrayImage::from_fn(20, 20, |x, y| 10.0 * y as f64 - 0.01 * x as f64);
        let plateau = preservation_model(1.0, 1.0);
        assert!((q_g(&a, &a, &f).unwrap() - plateau).abs() < 0.01);
    }

    #[test]
    fn q_g_plateau_on_perfect_fusion() {
        let t = texture(40, 30);
        let plateau = preservation_model(1.0, 1.0);
        assert!((q_g(&t, &t, &t).unwrap() - plateau).abs() < 0.01);
    }

    #[test]
    fn q_g_collapses_on_flat_fusion() {
        let t = texture(40, 30);
        let flat = GrayImage::filled(40, 30, 128.0);
        assert!(q_g(&t, &t, &flat).unwrap() < 0.05);
    }

    #[test]
    fn q_nmi_identity_is_two() {
        let t = texture(32, 32);
        assert_eq!(q_nmi(&t, &t, &t).unwrap(), 2.0);
    }

    #[test]
    fn q_nmi_first_term_exact_when_fused_equals_first_source() {
        let a = texture(32, 32);
        let b = GrayImage::from_fn(32, 32, |x, y| ((x * 13 + y * 7) % 200) as f64);
        let total = q_nmi(&a, &b, &a).unwrap();
        let (hb, hf, hbf) = entropies(&b, &a);
        let second = 2.0 * (hb + hf - hbf) / (hb + hf);
        assert!((total - (1.0 + second)).abs() < 1e-12);
    }

    #[test]
    fn ncie_identity_correlation() {
        let r = DMatrix::<f64>::identity(3, 3);
        let expected = 1.0 - 3.0f64.ln() / 256.0f64.ln();
        assert!((ncie_from_correlation(&r) - expected).abs() < 1e-12);
        assert!((expected - 0.8019).abs() < 1e-4);
    }

    #[test]
    fn ncie_identical_images() {
        let t = texture(32, 32);
        let v = ncie(&[t.clone(), t.clone()], &t).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_offset_by_one() {
        let a = texture(16, 16);
        let b = a.map(|v| v + 1.0);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 10.0 * 65025f64.log10()).abs() < 1e-12);
        assert!((p - 48.13).abs() < 0.01);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        assert_eq!(psnr(&b, &a).unwrap(), p);
    }

    #[test]
    fn csv_row_layout() {
        let r = MetricsReport {
            name: "x".into(),
            q_g: 0.5,
            q_nmi: 1.0,
            ncie: 0.8,
            psnr_vs_gt: Some(30.0),
        };
        assert_eq!(r.csv_row(), "x,0.500000,1.000000,0.800000,30.0000");
        assert!(format_table(&[r]).starts_with("Method"));
    }
}
