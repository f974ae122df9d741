//! Confidence-weighted edge-aware smoothing on a hard-quantized bilateral
//! grid.
//!
//! Pixels are splatted to vertices keyed by `(cell x, cell y, intensity bin)`.
//! The grid blur adds each vertex twice to its (up to) six axis neighbors;
//! bistochastization finds per-vertex scales `n` so that
//! `diag(n) * blur * diag(n)` has row sums equal to the vertex masses `m`.
//! The smoothing problem then reduces to the vertex-space system
//!
//! ```text
//! (lambda * (diag(d) - diag(n) blur diag(n)) + diag(splat(c))) y = splat(c * t)
//! ```
//!
//! where `d` are the row sums of the normalized blur (equal to `m` up to the
//! fixed-point residual). Using the realized row sums makes the smoothness
//! operator an exact graph Laplacian, so constants are preserved exactly and
//! the solution obeys the discrete maximum principle.
//!
//! which is solved with Jacobi-preconditioned conjugate gradient and sliced
//! back to pixels.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{check_same_shape, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverParams {
    /// Spatial cell size in pixels.
    pub sigma_xy: usize,
    /// Intensity bin width on the `[0, 255]` scale.
    pub sigma_in: f64,
    pub lambda: f64,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
    pub bistoch_iters: usize,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            sigma_xy: 8,
            sigma_in: 16.0,
            lambda: 64.0,
            cg_tol: 1e-5,
            cg_max_iters: 25,
            bistoch_iters: 16,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_xy < 1 {
            return Err(Error::Contract("sigma_xy must be >= 1".into()));
        }
        if !(self.sigma_in > 0.0 && self.sigma_in.is_finite()) {
            return Err(Error::Contract("sigma_in must be > 0".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Contract("lambda must be >= 0".into()));
        }
        if !(self.cg_tol > 0.0) {
            return Err(Error::Contract("cg_tol must be > 0".into()));
        }
        Ok(())
    }
}

type CellKey = (i64, i64, i64);

#[derive(Debug, Clone)]
pub struct BilateralGrid {
    width: usize,
    height: usize,
    offset: (usize, usize),
    keys: Vec<CellKey>,
    assignment: Vec<usize>,
    mass: Vec<f64>,
    nbr_start: Vec<usize>,
    nbr_index: Vec<usize>,
    scale: Option<Vec<f64>>,
    row_sums: Option<Vec<f64>>,
}

/// Quantize `reference` into grid vertices. Only occupied cells become
/// vertices, numbered in first-touch raster order.
pub fn build_grid(
    reference: &GrayImage,
    params: &SolverParams,
    offset: (usize, usize),
) -> Result<BilateralGrid> {
    params.validate()?;
    let s = params.sigma_xy;
    if offset.0 >= s || offset.1 >= s {
        return Err(Error::Contract(format!(
            "origin offset {offset:?} must be below sigma_xy = {s}"
        )));
    }
    let (w, h) = (reference.width(), reference.height());
    let mut lookup: HashMap<CellKey, usize> = HashMap::new();
    let mut keys = Vec::new();
    let mut mass: Vec<f64> = Vec::new();
    let mut assignment = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let key = (
                ((x + offset.0) / s) as i64,
                ((y + offset.1) / s) as i64,
                (reference.get(x, y) / params.sigma_in).floor() as i64,
            );
            let v = *lookup.entry(key).or_insert_with(|| {
                keys.push(key);
                mass.push(0.0);
                keys.len() - 1
            });
            mass[v] += 1.0;
            assignment.push(v);
        }
    }
    let mut nbr_start = Vec::with_capacity(keys.len() + 1);
    let mut nbr_index = Vec::new();
    nbr_start.push(0);
    for &(cx, cy, cb) in &keys {
        for d in [
            (-1, 0, 0),
            (1, 0, 0),
            (0, -1, 0),
            (0, 1, 0),
            (0, 0, -1),
            (0, 0, 1),
        ] {
            if let Some(&j) = lookup.get(&(cx + d.0, cy + d.1, cb + d.2)) {
                nbr_index.push(j);
            }
        }
        nbr_start.push(nbr_index.len());
    }
    Ok(BilateralGrid {
        width: w,
        height: h,
        offset,
        keys,
        assignment,
        mass,
        nbr_start,
        nbr_index,
        scale: None,
        row_sums: None,
    })
}

impl BilateralGrid {
    pub fn num_vertices(&self) -> usize {
        self.keys.len()
    }

    pub fn offset(&self) -> (usize, usize) {
        self.offset
    }

    /// Vertex index of each pixel, row-major.
    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// `(cell x, cell y, intensity bin)` of each vertex.
    pub fn keys(&self) -> &[(i64, i64, i64)] {
        &self.keys
    }

    /// Pixel count per vertex (`m`).
    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// Bistochastization scales (`n`), once computed.
    pub fn scale(&self) -> Option<&[f64]> {
        self.scale.as_deref()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.nbr_index[self.nbr_start[v]..self.nbr_start[v + 1]]
    }

    /// `2 v_i + sum of v_j over the axis neighbors of i`.
    pub fn blur(&self, v: &[f64]) -> Vec<f64> {
        (0..self.num_vertices())
            .map(|i| {
                let mut acc = 2.0 * v[i];
                for &j in self.neighbors(i) {
                    acc += v[j];
                }
                acc
            })
            .collect()
    }

    /// Sum per-pixel values into their vertices, in raster order.
    pub fn splat(&self, values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_vertices()];
        for (&v, &x) in self.assignment.iter().zip(values) {
            out[v] += x;
        }
        out
    }

    pub fn slice(&self, vertex_values: &[f64]) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            vertex_values[self.assignment[y * self.width + x]]
        })
    }

    /// Row sums of `diag(n) * blur * diag(n)`; these match the masses to
    /// the accuracy of the fixed-point iteration.
    pub fn normalized_row_sums(&self) -> Option<&[f64]> {
        self.row_sums.as_deref()
    }

    /// Run `iters` rounds of `n <- sqrt(n * m / blur(n))` from `n = 1`.
    pub fn bistochastize(&mut self, iters: usize) -> Result<()> {
        let mut n = vec![1.0; self.num_vertices()];
        for _ in 0..iters {
            let bn = self.blur(&n);
            for i in 0..n.len() {
                let ratio = n[i] * self.mass[i] / bn[i];
                if !(ratio > 0.0 && ratio.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "bistochastization produced {ratio} at vertex {i}"
                    )));
                }
                n[i] = ratio.sqrt();
            }
        }
        let bn = self.blur(&n);
        self.row_sums = Some(n.iter().zip(&bn).map(|(a, b)| a * b).collect());
        self.scale = Some(n);
        Ok(())
    }

    /// Apply `lambda * (diag(d) - diag(n) blur diag(n)) + diag(c)`, where `d`
    /// holds the row sums of the normalized blur.
    fn apply_system(&self, lambda: f64, conf: &[f64], y: &[f64]) -> Vec<f64> {
        let n = self.scale.as_ref().expect("grid must be bistochastized");
        let d = self.row_sums.as_ref().expect("grid must be bistochastized");
        let ny: Vec<f64> = n.iter().zip(y).map(|(a, b)| a * b).collect();
        let bny = self.blur(&ny);
        (0..y.len())
            .map(|i| lambda * (d[i] * y[i] - n[i] * bny[i]) + conf[i] * y[i])
            .collect()
    }

    fn system_diagonal(&self, lambda: f64, conf: &[f64]) -> Vec<f64> {
        let n = self.scale.as_ref().expect("grid must be bistochastized");
        let d = self.row_sums.as_ref().expect("grid must be bistochastized");
        (0..n.len())
            .map(|i| lambda * (d[i] - 2.0 * n[i] * n[i]) + conf[i])
            .collect()
    }

    /// Dense copy of the vertex-space system matrix.
    pub fn system_matrix(&self, lambda: f64, conf: &[f64]) -> DMatrix<f64> {
        let n = self.scale.as_ref().expect("grid must be bistochastized");
        let d = self.row_sums.as_ref().expect("grid must be bistochastized");
        let k = self.num_vertices();
        let mut a = DMatrix::zeros(k, k);
        for i in 0..k {
            a[(i, i)] = lambda * (d[i] - 2.0 * n[i] * n[i]) + conf[i];
            for &j in self.neighbors(i) {
                a[(i, j)] -= lambda * n[i] * n[j];
            }
        }
        a
    }
}

/// Splatted right-hand side and confidence mass for one solve.
struct Problem {
    grid: BilateralGrid,
    conf_mass: Vec<f64>,
    rhs: Vec<f64>,
}

fn prepare(
    target: &GrayImage,
    confidence: &GrayImage,
    reference: &GrayImage,
    params: &SolverParams,
    offset: (usize, usize),
) -> Result<Problem> {
    check_same_shape(&[target, confidence, reference], "solver input")?;
    let mut grid = build_grid(reference, params, offset)?;
    grid.bistochastize(params.bistoch_iters)?;
    let weighted: Vec<f64> = target
        .data()
        .iter()
        .zip(confidence.data())
        .map(|(t, c)| t * c)
        .collect();
    let conf_mass = grid.splat(confidence.data());
    let rhs = grid.splat(&weighted);
    Ok(Problem {
        grid,
        conf_mass,
        rhs,
    })
}

#[derive(Debug, Clone)]
pub struct Solution {
    /// Sliced result, clamped to `[0, 1]`.
    pub map: GrayImage,
    /// Unclamped vertex values.
    pub vertex_values: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Final relative residual `|b - A y| / |b|`.
    pub residual: f64,
    pub vertices: usize,
    pub offset: (usize, usize),
}

impl fmt::Display for Solution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "offset=({},{}) vertices={} cg_iters={} residual={:.3e}{}",
            self.offset.0,
            self.offset.1,
            self.vertices,
            self.iterations,
            self.residual,
            if self.converged { "" } else { " (not converged)" }
        )
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Smooth `target` under `confidence`, guided by `reference`, on the grid
/// anchored at `offset`.
pub fn solve(
    target: &GrayImage,
    confidence: &GrayImage,
    reference: &GrayImage,
    params: &SolverParams,
    offset: (usize, usize),
) -> Result<Solution> {
    let Problem {
        grid,
        conf_mass,
        rhs,
    } = prepare(target, confidence, reference, params, offset)?;
    let lambda = params.lambda;
    let diag = grid.system_diagonal(lambda, &conf_mass);
    let inv_diag: Vec<f64> = diag
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 })
        .collect();

    let mut y: Vec<f64> = rhs
        .iter()
        .zip(&conf_mass)
        .map(|(&b, &c)| if c > 0.0 { b / c } else { 0.0 })
        .collect();
    let b_norm = dot(&rhs, &rhs).sqrt();
    let rel = |r: &[f64]| {
        if b_norm > 0.0 {
            dot(r, r).sqrt() / b_norm
        } else {
            dot(r, r).sqrt()
        }
    };

    let ay = grid.apply_system(lambda, &conf_mass, &y);
    let mut r: Vec<f64> = rhs.iter().zip(&ay).map(|(b, a)| b - a).collect();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut residual = rel(&r);
    let mut best = (residual, y.clone());
    let mut iterations = 0;
    while residual > params.cg_tol && iterations < params.cg_max_iters {
        let ap = grid.apply_system(lambda, &conf_mass, &p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for i in 0..y.len() {
            y[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..z.len() {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..p.len() {
            p[i] = z[i] + beta * p[i];
        }
        iterations += 1;
        residual = rel(&r);
        if !residual.is_finite() {
            return Err(Error::Numeric("conjugate gradient diverged".into()));
        }
        if residual < best.0 {
            best = (residual, y.clone());
        }
    }
    let (residual, y) = best;
    let map = grid.slice(&y).map(|v| v.clamp(0.0, 1.0));
    Ok(Solution {
        map,
        vertex_values: y,
        converged: residual <= params.cg_tol,
        iterations,
        residual,
        vertices: grid.num_vertices(),
        offset,
    })
}

#[derive(Debug, Clone)]
pub struct DenseSolution {
    pub map: GrayImage,
    pub vertex_values: Vec<f64>,
    /// Vertices with an all-zero system row, left at zero.
    pub zero_mass_vertices: Vec<usize>,
}

/// Largest image accepted by [`dense_oracle_solve`].
pub const DENSE_MAX_PIXELS: usize = 64 * 64;

/// The same linear system as [`solve`], assembled densely and factorized.
pub fn dense_oracle_solve(
    target: &GrayImage,
    confidence: &GrayImage,
    reference: &GrayImage,
    params: &SolverParams,
    offset: (usize, usize),
) -> Result<DenseSolution> {
    if target.len() > DENSE_MAX_PIXELS {
        return Err(Error::Contract(format!(
            "dense oracle limited to {DENSE_MAX_PIXELS} pixels"
        )));
    }
    let Problem {
        grid,
        conf_mass,
        rhs,
    } = prepare(target, confidence, reference, params, offset)?;
    let a = grid.system_matrix(params.lambda, &conf_mass);
    let k = grid.num_vertices();
    let zero_rows: Vec<usize> = (0..k)
        .filter(|&i| (0..k).all(|j| a[(i, j)] == 0.0))
        .collect();
    let active: Vec<usize> = (0..k).filter(|i| !zero_rows.contains(i)).collect();
    let sub = DMatrix::from_fn(active.len(), active.len(), |i, j| a[(active[i], active[j])]);
    let sub_b = DVector::from_iterator(active.len(), active.iter().map(|&i| rhs[i]));
    let x = match sub.clone().cholesky() {
        Some(ch) => ch.solve(&sub_b),
        None => sub
            .lu()
            .solve(&sub_b)
            .ok_or_else(|| Error::Numeric("dense system is singular".into()))?,
    };
    let mut y = vec![0.0; k];
    for (slot, &i) in active.iter().enumerate() {
        y[i] = x[slot];
    }
    let map = grid.slice(&y).map(|v| v.clamp(0.0, 1.0));
    Ok(DenseSolution {
        map,
        vertex_values: y,
        zero_mass_vertices: zero_rows,
    })
}

/// Pixel-space energy that the grid system minimizes over vertex-constant
/// maps: the confidence-weighted data term plus `lambda` times
/// `sum_r (d_v / m_v) W(r)^2 - u^T blur u`, with `v` the vertex of pixel `r`
/// and `u_v = n_v * mean of W over v`. For a sliced map this equals
/// `y^T A y - 2 b^T y + sum c t^2`.
pub fn objective(
    map: &GrayImage,
    target: &GrayImage,
    confidence: &GrayImage,
    reference: &GrayImage,
    params: &SolverParams,
    offset: (usize, usize),
) -> Result<f64> {
    check_same_shape(&[map, target, confidence, reference], "objective input")?;
    let mut grid = build_grid(reference, params, offset)?;
    grid.bistochastize(params.bistoch_iters)?;
    let data: f64 = map
        .data()
        .iter()
        .zip(target.data())
        .zip(confidence.data())
        .map(|((w, t), c)| c * (w - t) * (w - t))
        .sum();
    let n = grid.scale().unwrap();
    let d = grid.normalized_row_sums().unwrap();
    let sums = grid.splat(map.data());
    let u: Vec<f64> = (0..n.len()).map(|i| n[i] * sums[i] / grid.mass[i]).collect();
    let sq: f64 = map
        .data()
        .iter()
        .zip(grid.assignment())
        .map(|(w, &v)| d[v] / grid.mass[v] * w * w)
        .sum();
    let smooth = sq - dot(&u, &grid.blur(&u));
    Ok(data + params.lambda * smooth)
}

#[derive(Debug, Clone)]
pub struct BlockMotionSolution {
    pub map: GrayImage,
    pub solves: Vec<Solution>,
}

impl BlockMotionSolution {
    pub fn converged(&self) -> bool {
        self.solves.iter().all(|s| s.converged)
    }
}

/// Average of [`solve`] over the diagonal origin offsets
/// `(t, t), t = 0..sigma_xy`, which removes the cell-boundary steps of a
/// single hard grid.
pub fn solve_with_block_motion(
    target: &GrayImage,
    confidence: &GrayImage,
    reference: &GrayImage,
    params: &SolverParams,
) -> Result<BlockMotionSolution> {
    params.validate()?;
    let solves: Vec<Solution> = (0..params.sigma_xy)
        .into_par_iter()
        .map(|t| solve(target, confidence, reference, params, (t, t)))
        .collect::<Result<_>>()?;
    let count = solves.len() as f64;
    let mut acc = solves[0].map.clone();
    for s in &solves[1..] {
        for (a, b) in acc.data_mut().iter_mut().zip(s.map.data()) {
            *a += b;
        }
    }
    if solves.len() > 1 {
        acc.data_mut().iter_mut().for_each(|v| *v /= count);
    }
    Ok(BlockMotionSolution { map: acc, solves })
}

/// Mean absolute jump across the cell boundaries of the offset-0 grid, both
/// horizontally and vertically.
pub fn blockiness(map: &GrayImage, sigma_xy: usize) -> f64 {
    let (w, h) = (map.width(), map.height());
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in (sigma_xy - 1..w.saturating_sub(1)).step_by(sigma_xy) {
            total += (map.get(x + 1, y) - map.get(x, y)).abs();
            count += 1;
        }
    }
    for y in (sigma_xy - 1..h.saturating_sub(1)).step_by(sigma_xy) {
        for x in 0..w {
            total += (map.get(x, y + 1) - map.get(x, y)).abs();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(sigma_xy: usize, lambda: f64) -> SolverParams {
        SolverParams {
            sigma_xy,
            lambda,
            ..SolverParams::default()
        }
    }

    #[test]
    fn constant_6x6_has_nine_vertices() {
        let img = GrayImage::filled(6, 6, 100.0);
        let g = build_grid(&img, &params(2, 64.0), (0, 0)).unwrap();
        assert_eq!(g.num_vertices(), 9);
        assert!(g.mass().iter().all(|&m| m == 4.0));
    }

    #[test]
    fn offset_moves_cell_boundaries() {
        let img = GrayImage::filled(6, 6, 100.0);
        let p = params(2, 64.0);
        let g0 = build_grid(&img, &p, (0, 0)).unwrap();
        let g1 = build_grid(&img, &p, (1, 1)).unwrap();
        // enumerate the cell coordinate of each pixel under both offsets
        for y in 0..6 {
            for x in 0..6 {
                let k0 = g0.keys()[g0.assignment()[y * 6 + x]];
                let k1 = g1.keys()[g1.assignment()[y * 6 + x]];
                assert_eq!((k0.0, k0.1), ((x / 2) as i64, (y / 2) as i64));
                assert_eq!((k1.0, k1.1), (((x + 1) / 2) as i64, ((y + 1) / 2) as i64));
            }
        }
        // 4x4 cells, corners hold 1 pixel, edges 2, interior 4
        assert_eq!(g1.num_vertices(), 16);
        assert_eq!(g1.mass().iter().sum::<f64>(), 36.0);
    }

    #[test]
    fn offset_outside_cell_rejected() {
        let img = GrayImage::filled(4, 4, 0.0);
        assert!(build_grid(&img, &params(2, 1.0), (2, 0)).is_err());
    }

    #[test]
    fn single_vertex_fixed_point() {
        let img = GrayImage::filled(3, 3, 50.0);
        let mut g = build_grid(&img, &params(8, 64.0), (0, 0)).unwrap();
        assert_eq!(g.num_vertices(), 1);
        g.bistochastize(16).unwrap();
        let n = g.scale().unwrap()[0];
        assert!((n - (9.0f64 / 2.0).sqrt()).abs() < 1e-12);
        let rows = g.normalized_row_sums().unwrap();
        assert!((rows[0] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_chain_is_symmetric() {
        // a 1-row image split into 8 equal cells: a uniform chain
        let img = GrayImage::filled(16, 1, 10.0);
        let mut g = build_grid(&img, &params(2, 1.0), (0, 0)).unwrap();
        assert_eq!(g.num_vertices(), 8);
        g.bistochastize(16).unwrap();
        let n = g.scale().unwrap();
        for i in 0..8 {
            assert!((n[i] - n[7 - i]).abs() < 1e-12);
        }
    }

    #[test]
    fn system_matrix_is_symmetric() {
        let img = GrayImage::from_fn(12, 10, |x, y| ((x * 37 + y * 91) % 256) as f64);
        let mut g = build_grid(&img, &params(2, 64.0), (1, 1)).unwrap();
        g.bistochastize(16).unwrap();
        let conf = g.splat(&vec![1.0; 120]);
        let a = g.system_matrix(64.0, &conf);
        assert!((&a - a.transpose()).amax() < 1e-10);
        for i in 0..a.nrows() {
            assert!(a[(i, i)] > 0.0);
        }
    }

    #[test]
    fn zero_lambda_cell_constant_target_is_exact() {
        let img = GrayImage::from_fn(8, 8, |x, y| ((x * 31 + y * 17) % 256) as f64);
        // target constant per 2x2 cell
        let target = GrayImage::from_fn(8, 8, |x, y| ((x / 2 + y / 2) % 2) as f64);
        let conf = GrayImage::from_fn(8, 8, |x, _| if x % 3 == 0 { 0.1 } else { 1.0 });
        let s = solve(&target, &conf, &img, &params(2, 0.0), (0, 0)).unwrap();
        for (a, b) in s.map.data().iter().zip(target.data()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn zero_mass_vertex_left_at_zero() {
        let img = GrayImage::from_fn(4, 4, |x, _| if x < 2 { 0.0 } else { 200.0 });
        let target = GrayImage::filled(4, 4, 1.0);
        let conf = GrayImage::from_fn(4, 4, |x, _| if x < 2 { 0.0 } else { 1.0 });
        let d = dense_oracle_solve(&target, &conf, &img, &params(4, 0.0), (0, 0)).unwrap();
        assert_eq!(d.zero_mass_vertices, vec![0]);
        assert_eq!(d.map.get(0, 0), 0.0);
        assert!((d.map.get(3, 3) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blockiness_of_piecewise_cells() {
        let m = GrayImage::from_fn(8, 4, |x, _| if x < 4 { 0.0 } else { 1.0 });
        // the only boundary inside the image is x = 3|4, jump 1 on each row
        assert_eq!(blockiness(&m, 4), 1.0);
        let flat = GrayImage::filled(8, 8, 0.5);
        assert_eq!(blockiness(&flat, 4), 0.0);
    }
}
