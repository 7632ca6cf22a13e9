//! Python bindings. Arrays cross the boundary as nested lists of floats.

use std::path::PathBuf;

use ndarray::{Array2, Array4};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use popusense::checkpoint::{load_checkpoint, Checkpoint};
use popusense::config::RunConfig;
use popusense::evalkit::{self, ScoredSet};
use popusense::hypergraph::{self, Activation, ConvParams, Metric};
use popusense::pdc::{self, ImageBatch};
use popusense::synthdata::{self, AnomalyType};
use popusense::{train, Error};

type Plane = Vec<Vec<f64>>;
type Mask = Vec<Vec<bool>>;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFiniteLoss { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged nested list"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), cols), flat).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn bool_matrix(rows: &[Vec<bool>]) -> PyResult<Array2<bool>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged nested list"));
    }
    let flat: Vec<bool> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), cols), flat).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn nested<T: Copy>(a: &Array2<T>) -> Vec<Vec<T>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

/// One hypergraph convolution layer over `x` (N x d_in).
#[pyfunction]
#[pyo3(signature = (x, edges, theta, bias, relu=false, weights=None))]
fn hgconv(
    x: Vec<Vec<f64>>,
    edges: Vec<Vec<usize>>,
    theta: Vec<Vec<f64>>,
    bias: Vec<f64>,
    relu: bool,
    weights: Option<Vec<f64>>,
) -> PyResult<Vec<Vec<f64>>> {
    let x = matrix(&x)?;
    let weights = weights.unwrap_or_else(|| vec![1.0; edges.len()]);
    let g = hypergraph::incidence_from_edges(x.nrows(), &edges, &weights).map_err(to_py)?;
    let params = ConvParams {
        theta: matrix(&theta)?,
        bias: bias.into(),
        activation: if relu { Activation::Relu } else { Activation::Linear },
    };
    let y = hypergraph::hgconv(x.view(), &g, &params).map_err(to_py)?;
    Ok(nested(&y))
}

/// Hyperedges `{v} + kNN(v)` under squared Euclidean distance.
#[pyfunction]
fn knn_hyperedges(features: Vec<Vec<f64>>, k: usize) -> PyResult<Vec<Vec<usize>>> {
    let f = matrix(&features)?;
    let g = hypergraph::knn_hyperedges(f.view(), k, Metric::Euclidean).map_err(to_py)?;
    Ok(g.edges().to_vec())
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    evalkit::auroc(&ScoredSet::new(scores, labels).map_err(to_py)?).map_err(to_py)
}

#[pyfunction]
fn average_precision(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    evalkit::average_precision(&ScoredSet::new(scores, labels).map_err(to_py)?).map_err(to_py)
}

#[allow(clippy::type_complexity)]
fn maps_and_masks(maps: &[Plane], masks: &[Mask]) -> PyResult<(Vec<Array2<f64>>, Vec<Array2<bool>>)> {
    Ok((
        maps.iter().map(|m| matrix(m)).collect::<PyResult<_>>()?,
        masks.iter().map(|m| bool_matrix(m)).collect::<PyResult<_>>()?,
    ))
}

#[pyfunction]
fn pixel_auroc(maps: Vec<Vec<Vec<f64>>>, masks: Vec<Vec<Vec<bool>>>) -> PyResult<f64> {
    let (a, m) = maps_and_masks(&maps, &masks)?;
    evalkit::pixel_auroc(&a, &m).map_err(to_py)
}

#[pyfunction]
fn best_dice(maps: Vec<Vec<Vec<f64>>>, masks: Vec<Vec<Vec<bool>>>) -> PyResult<f64> {
    let (a, m) = maps_and_masks(&maps, &masks)?;
    evalkit::best_dice(&a, &m).map_err(to_py)
}

/// `(image, mask)` for anomaly kind `none`, `contrast` or `texture`.
#[pyfunction]
fn generate_sample(kind: &str, seed: u64, size: usize) -> PyResult<(Plane, Mask)> {
    let kind: AnomalyType = kind.parse().map_err(to_py)?;
    let s = synthdata::generate_sample(kind, seed, size).map_err(to_py)?;
    Ok((nested(&s.image), nested(&s.mask)))
}

/// Parsed and validated run configuration.
#[pyclass(name = "RunConfig", frozen)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (toml_text=""))]
    fn new(toml_text: &str) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::from_toml_str(toml_text).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::load(&path).map_err(to_py)? })
    }

    fn config_hash(&self) -> String {
        self.inner.config_hash()
    }

    fn to_json(&self) -> String {
        self.inner.canonical_json()
    }

    /// Writes the dataset and returns the number of manifest rows.
    fn build_dataset(&self, out_dir: PathBuf) -> PyResult<usize> {
        synthdata::build_dataset(&self.inner.data, &out_dir).map(|m| m.len()).map_err(to_py)
    }

    /// Trains and writes a checkpoint; returns the per-epoch stats CSV.
    fn fit(&self, dataset_dir: PathBuf, out_checkpoint: PathBuf) -> PyResult<String> {
        train::fit(&self.inner, &dataset_dir, &out_checkpoint).map(|s| s.to_csv()).map_err(to_py)
    }
}

/// A loaded checkpoint that can reconstruct and score images.
#[pyclass(name = "Checkpoint", frozen)]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_checkpoint(&path).map_err(to_py)? })
    }

    #[getter]
    fn configuration(&self) -> &'static str {
        self.inner.pipeline.configuration.as_str()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed()
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash()
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_bytes()
    }

    /// Reconstruction of one `S x S` image.
    fn reconstruct(&self, image: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let img = matrix(&image)?;
        let s = img.nrows();
        let x =
            ImageBatch::new(img.into_shape_with_order((1, 1, s, s)).map_err(|e| PyValueError::new_err(e.to_string()))?)
                .map_err(to_py)?;
        let y: Array4<f64> = self.inner.pipeline.reconstruct(&x).map_err(to_py)?.into_inner();
        Ok(nested(&y.into_shape_with_order((s, s)).expect("single image")))
    }

    /// Anomaly score of one image with the checkpoint's evaluation settings.
    fn score(&self, image: Vec<Vec<f64>>) -> PyResult<f64> {
        let img = matrix(&image)?;
        let x = ImageBatch::from_planes([img.view()]).map_err(to_py)?;
        let xhat = self.inner.pipeline.reconstruct(&x).map_err(to_py)?;
        let eval = &self.inner.run.eval;
        let a = pdc::residual_map(&x, &xhat, eval.smoothing_sigma).map_err(to_py)?;
        Ok(pdc::image_score(&a, eval.top_q).map_err(to_py)?[0])
    }

    /// Metrics report for the test split of `dataset_dir`, as JSON.
    fn evaluate(&self, dataset_dir: PathBuf) -> PyResult<String> {
        evalkit::evaluate_checkpoint(&self.inner, &dataset_dir).map(|r| r.to_json()).map_err(to_py)
    }
}

#[pymodule]
fn popusense_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(hgconv, m)?)?;
    m.add_function(wrap_pyfunction!(knn_hyperedges, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_auroc, m)?)?;
    m.add_function(wrap_pyfunction!(best_dice, m)?)?;
    m.add_function(wrap_pyfunction!(generate_sample, m)?)?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    Ok(())
}
