//! Python bindings for focusfuse.

use std::path::PathBuf;

use focusfuse_core::{fusion, image, metrics, qnn, solver, synthetic, focus};
use focusfuse_core::{Error, FusionResult, GrayImage, HyperParams, PipelineParams, QnnModel, SolverParams};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Grayscale image with float intensities, row-major.
#[pyclass(name = "Image", module = "focusfuse", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyImage {
    inner: GrayImage,
}

impl From<GrayImage> for PyImage {
    fn from(inner: GrayImage) -> Self {
        Self { inner }
    }
}

fn unwrap_all(images: &[PyRef<'_, PyImage>]) -> Vec<GrayImage> {
    images.iter().map(|i| i.inner.clone()).collect()
}

fn wrap_all(images: Vec<GrayImage>) -> Vec<PyImage> {
    images.into_iter().map(PyImage::from).collect()
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: usize, height: usize, data: Vec<f64>) -> PyResult<Self> {
        GrayImage::new(width, height, data).map(Self::from).map_err(to_py)
    }

    #[staticmethod]
    fn filled(width: usize, height: usize, value: f64) -> Self {
        GrayImage::filled(width, height, value).into()
    }

    /// PGM or PNG file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        image::load_gray(path).map(Self::from).map_err(to_py)
    }

    #[staticmethod]
    fn load_f32map(path: PathBuf) -> PyResult<Self> {
        image::load_f32map(path).map(Self::from).map_err(to_py)
    }

    fn save_pgm(&self, path: PathBuf) -> PyResult<()> {
        image::save_pgm(&self.inner, path).map_err(to_py)
    }

    fn save_f32map(&self, path: PathBuf) -> PyResult<()> {
        image::save_f32map(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    fn get(&self, x: usize, y: usize) -> PyResult<f64> {
        if x >= self.inner.width() || y >= self.inner.height() {
            return Err(PyValueError::new_err(format!("pixel ({x}, {y}) out of bounds")));
        }
        Ok(self.inner.get(x, y))
    }

    /// Flat row-major pixel list.
    fn to_list(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    fn min_max(&self) -> (f64, f64) {
        self.inner.min_max()
    }

    fn gaussian_blur(&self, sigma: f64) -> Self {
        image::gaussian_blur(&self.inner, sigma).into()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.width(), self.inner.height())
    }
}

/// Patch-quality network.
#[pyclass(name = "Model", module = "focusfuse", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: QnnModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn random(seed: u64) -> Self {
        Self {
            inner: QnnModel::random(seed),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        QnnModel::load(path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    /// Train from this model on pristine images blurred at each sigma.
    /// Returns the trained model and the per-epoch loss.
    #[pyo3(signature = (images, sigmas, learning_rate=None, batch_size=None, epochs=None, seed=None))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &self,
        py: Python<'_>,
        images: Vec<PyRef<'_, PyImage>>,
        sigmas: Vec<f64>,
        learning_rate: Option<f64>,
        batch_size: Option<usize>,
        epochs: Option<usize>,
        seed: Option<u64>,
    ) -> PyResult<(Self, Vec<f64>)> {
        let named: Vec<(String, GrayImage)> = images
            .iter()
            .enumerate()
            .map(|(i, img)| (format!("image{i}"), img.inner.clone()))
            .collect();
        let d = HyperParams::default();
        let hp = HyperParams {
            learning_rate: learning_rate.unwrap_or(d.learning_rate),
            batch_size: batch_size.unwrap_or(d.batch_size),
            epochs: epochs.unwrap_or(d.epochs),
            seed: seed.unwrap_or(d.seed),
        };
        let init = &self.inner;
        py.detach(|| {
            let data = qnn::gen_training_data(&named, &sigmas, None)?;
            qnn::train(init, &data, &hp)
        })
        .map(|(inner, curve)| (Self { inner }, curve))
        .map_err(to_py)
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

/// Result of a full fusion run.
#[pyclass(name = "FusionResult", module = "focusfuse", frozen)]
pub struct PyFusionResult {
    inner: FusionResult,
}

#[pymethods]
impl PyFusionResult {
    #[getter]
    fn fused(&self) -> PyImage {
        self.inner.fused.clone().into()
    }

    #[getter]
    fn scores(&self) -> Vec<PyImage> {
        wrap_all(self.inner.scores.clone())
    }

    #[getter]
    fn masks(&self) -> Vec<PyImage> {
        wrap_all(self.inner.masks.clone())
    }

    #[getter]
    fn confidence(&self) -> PyImage {
        self.inner.confidence.clone().into()
    }

    #[getter]
    fn smoothed(&self) -> Vec<PyImage> {
        wrap_all(self.inner.smoothed.clone())
    }

    #[getter]
    fn weights(&self) -> Vec<PyImage> {
        wrap_all(self.inner.weights.clone())
    }

    #[getter]
    fn converged(&self) -> Vec<bool> {
        self.inner.converged.clone()
    }

    #[getter]
    fn solver_log(&self) -> Vec<String> {
        self.inner.solver_log.clone()
    }

    fn dump(&self, dir: PathBuf, sources: Vec<PyRef<'_, PyImage>>) -> PyResult<()> {
        self.inner.dump(dir, &unwrap_all(&sources)).map_err(to_py)
    }
}

fn solver_params(
    sigma_xy: Option<usize>,
    sigma_in: Option<f64>,
    lam: Option<f64>,
    cg_tol: Option<f64>,
    cg_max_iters: Option<usize>,
) -> SolverParams {
    let d = SolverParams::default();
    SolverParams {
        sigma_xy: sigma_xy.unwrap_or(d.sigma_xy),
        sigma_in: sigma_in.unwrap_or(d.sigma_in),
        lambda: lam.unwrap_or(d.lambda),
        cg_tol: cg_tol.unwrap_or(d.cg_tol),
        cg_max_iters: cg_max_iters.unwrap_or(d.cg_max_iters),
        ..d
    }
}

/// Dense per-pixel quality score of an image.
#[pyfunction]
fn score_map(py: Python<'_>, model: &PyModel, img: &PyImage) -> PyResult<PyImage> {
    py.detach(|| qnn::score_map(&model.inner, &img.inner))
        .map(PyImage::from)
        .map_err(to_py)
}

/// Binary masks choosing the best-scored source per pixel.
#[pyfunction]
fn pre_estimate(scores: Vec<PyRef<'_, PyImage>>) -> PyResult<Vec<PyImage>> {
    focus::pre_estimate(&unwrap_all(&scores)).map(wrap_all).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (scores, threshold=None))]
fn confidence_map(scores: Vec<PyRef<'_, PyImage>>, threshold: Option<f64>) -> PyResult<PyImage> {
    let thr = threshold.unwrap_or(PipelineParams::default().threshold);
    focus::confidence_map(&unwrap_all(&scores), thr)
        .map(PyImage::from)
        .map_err(to_py)
}

/// Edge-aware smoothing of `target` guided by `reference`, averaged over
/// grid offsets.
#[pyfunction]
#[pyo3(signature = (target, confidence, reference, sigma_xy=None, sigma_in=None, lam=None, cg_tol=None, cg_max_iters=None))]
#[allow(clippy::too_many_arguments)]
fn solve(
    py: Python<'_>,
    target: &PyImage,
    confidence: &PyImage,
    reference: &PyImage,
    sigma_xy: Option<usize>,
    sigma_in: Option<f64>,
    lam: Option<f64>,
    cg_tol: Option<f64>,
    cg_max_iters: Option<usize>,
) -> PyResult<PyImage> {
    let p = solver_params(sigma_xy, sigma_in, lam, cg_tol, cg_max_iters);
    py.detach(|| solver::solve_with_block_motion(&target.inner, &confidence.inner, &reference.inner, &p))
        .map(|s| s.map.into())
        .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (sources, model, sigma_xy=None, sigma_in=None, lam=None, cg_tol=None, cg_max_iters=None, threshold=None))]
#[allow(clippy::too_many_arguments)]
fn run_pipeline(
    py: Python<'_>,
    sources: Vec<PyRef<'_, PyImage>>,
    model: &PyModel,
    sigma_xy: Option<usize>,
    sigma_in: Option<f64>,
    lam: Option<f64>,
    cg_tol: Option<f64>,
    cg_max_iters: Option<usize>,
    threshold: Option<f64>,
) -> PyResult<PyFusionResult> {
    let d = PipelineParams::default();
    let params = PipelineParams {
        solver: solver_params(sigma_xy, sigma_in, lam, cg_tol, cg_max_iters),
        threshold: threshold.unwrap_or(d.threshold),
        ..d
    };
    let images = unwrap_all(&sources);
    py.detach(|| fusion::run_pipeline(&images, &model.inner, &params))
        .map(|inner| PyFusionResult { inner })
        .map_err(to_py)
}

/// Blur `sharp` and swap regions by `mask`; returns `(i1, i2, ground_truth)`.
#[pyfunction]
#[pyo3(signature = (sharp, mask, sigma_blur=2.0))]
fn make_multifocus_pair(sharp: &PyImage, mask: &PyImage, sigma_blur: f64) -> PyResult<(PyImage, PyImage, PyImage)> {
    fusion::make_multifocus_pair(&sharp.inner, &mask.inner, sigma_blur)
        .map(|(a, b, gt)| (a.into(), b.into(), gt.into()))
        .map_err(to_py)
}

#[pyfunction]
fn textured_image(width: usize, height: usize, seed: u64) -> PyImage {
    synthetic::textured_image(width, height, seed).into()
}

#[pyfunction]
fn half_plane_mask(width: usize, height: usize, theta: f64) -> PyImage {
    synthetic::half_plane_mask(width, height, theta).into()
}

#[pyfunction]
fn disk_mask(width: usize, height: usize, cx: f64, cy: f64, radius: f64) -> PyImage {
    synthetic::disk_mask(width, height, cx, cy, radius).into()
}

#[pyfunction]
fn q_g(a: &PyImage, b: &PyImage, fused: &PyImage) -> PyResult<f64> {
    metrics::q_g(&a.inner, &b.inner, &fused.inner).map_err(to_py)
}

#[pyfunction]
fn q_nmi(a: &PyImage, b: &PyImage, fused: &PyImage) -> PyResult<f64> {
    metrics::q_nmi(&a.inner, &b.inner, &fused.inner).map_err(to_py)
}

#[pyfunction]
fn ncie(sources: Vec<PyRef<'_, PyImage>>, fused: &PyImage) -> PyResult<f64> {
    metrics::ncie(&unwrap_all(&sources), &fused.inner).map_err(to_py)
}

#[pyfunction]
fn psnr(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    metrics::psnr(&a.inner, &b.inner).map_err(to_py)
}

#[pymodule]
fn focusfuse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyFusionResult>()?;
    m.add_function(wrap_pyfunction!(score_map, m)?)?;
    m.add_function(wrap_pyfunction!(pre_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(confidence_map, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(make_multifocus_pair, m)?)?;
    m.add_function(wrap_pyfunction!(textured_image, m)?)?;
    m.add_function(wrap_pyfunction!(half_plane_mask, m)?)?;
    m.add_function(wrap_pyfunction!(disk_mask, m)?)?;
    m.add_function(wrap_pyfunction!(q_g, m)?)?;
    m.add_function(wrap_pyfunction!(q_nmi, m)?)?;
    m.add_function(wrap_pyfunction!(ncie, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    Ok(())
}
