//! Python bindings: numeric primitives, the three adaptation losses, data
//! generation, gradient checks, experiment runs and checkpoint inference.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use clustalign::cli::{self, ExperimentConfig, Overrides, RunError};
use clustalign::clustering::select_prototype as core_select_prototype;
use clustalign::data::{self, Dataset, DomainSpec, Shift};
use clustalign::gradsuite::{self, SuiteOptions};
use clustalign::graphcut::{self, AffinityGraph};
use clustalign::model::checkpoint::load_checkpoint;
use clustalign::model::{poly_lr as core_poly_lr, Segmenter};
use clustalign::numerics::ops;
use clustalign::{metrics, Tensor};

fn value_err(e: clustalign::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn run_err(e: RunError) -> PyErr {
    match e {
        RunError::Config(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(value_err)
}

fn graph(a: &[Vec<f64>]) -> PyResult<AffinityGraph> {
    let n = a.len();
    if a.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("affinity matrix must be square"));
    }
    AffinityGraph::from_matrix(n, a.concat()).map_err(value_err)
}

fn parse_shift(name: &str) -> PyResult<Shift> {
    match name {
        "none" => Ok(Shift::NONE),
        "default" => Ok(Shift::DEFAULT),
        "extreme" => Ok(Shift::EXTREME),
        other => Err(PyValueError::new_err(format!("unknown shift {other:?}; use none, default or extreme"))),
    }
}

#[pyfunction]
fn softmax(v: Vec<f64>) -> PyResult<Vec<f64>> {
    ops::softmax(&v).map_err(value_err)
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    ops::cosine_similarity(&a, &b).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (base_lr, iteration, max_iters, power = 0.9))]
fn poly_lr(base_lr: f64, iteration: usize, max_iters: usize, power: f64) -> f64 {
    core_poly_lr(base_lr, iteration, max_iters, power)
}

/// Returns `(prototype, index)` of the most central feature vector.
#[pyfunction]
fn select_prototype(features: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, usize)> {
    let refs: Vec<&[f64]> = features.iter().map(Vec::as_slice).collect();
    core_select_prototype(&refs).map_err(value_err)
}

/// Soft normalized cut of scores `p` (n x K) on an explicit affinity matrix.
/// Returns `(value, dL/dp)`.
#[pyfunction]
fn ncut_loss(p: Vec<Vec<f64>>, affinity: Vec<Vec<f64>>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let out = graphcut::ncut_loss(&matrix(&p)?, &graph(&affinity)?).map_err(value_err)?;
    Ok((out.value, out.grad_p.rows().map(<[f64]>::to_vec).collect()))
}

#[pyfunction]
fn hard_ncut_value(labels: Vec<usize>, affinity: Vec<Vec<f64>>, num_classes: usize) -> PyResult<f64> {
    graphcut::hard_ncut_value(&labels, &graph(&affinity)?, num_classes).map_err(value_err)
}

/// Finite-difference check of every analytic gradient; one dict per check.
#[pyfunction]
#[pyo3(signature = (instances = 20, probes = 100, eps = 1e-5, seed = 0))]
fn check_grads<'py>(py: Python<'py>, instances: usize, probes: usize, eps: f64, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let entries = gradsuite::run_suite(&SuiteOptions {
        instances,
        probes,
        eps,
        seed,
    })
    .map_err(value_err)?;
    entries
        .into_iter()
        .map(|e| {
            let d = PyDict::new(py);
            d.set_item("name", e.name)?;
            d.set_item("instances", e.instances)?;
            d.set_item("max_relative_error", e.max_relative_error)?;
            d.set_item("passed", e.passed)?;
            Ok(d)
        })
        .collect()
}

/// Runs an experiment from TOML text and returns the run summary as JSON text.
#[pyfunction]
#[pyo3(signature = (config_toml, output_dir = None, seeds = None))]
fn run_experiment(config_toml: &str, output_dir: Option<PathBuf>, seeds: Option<Vec<u64>>) -> PyResult<String> {
    let overrides = Overrides {
        output_dir,
        seeds,
        ..Overrides::default()
    };
    let cfg = ExperimentConfig::parse(config_toml, "<python>", &overrides).map_err(|e| run_err(e.into()))?;
    let summary = cli::run(&cfg).map_err(run_err)?;
    serde_json::to_string(&summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

type SampleParts = (Vec<usize>, Vec<f64>, Vec<Option<usize>>);

/// A labelled set of `H x W x C` images.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Synthetic images from the default domain, optionally shifted.
    #[staticmethod]
    #[pyo3(signature = (n, seed = 0, shift = "none"))]
    fn generate(n: usize, seed: u64, shift: &str) -> PyResult<Self> {
        let spec = data::shifted_spec(&DomainSpec::default(), parse_shift(shift)?).map_err(value_err)?;
        Ok(Self {
            inner: data::generate(&spec, n, seed).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: data::load_dataset(path).map_err(value_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::save_dataset(path, &self.inner).map_err(value_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.spec.num_classes
    }

    /// `(shape, flat row-major input, labels)`; IGNORE pixels are `None`.
    fn sample(&self, i: usize) -> PyResult<SampleParts> {
        let s = self
            .inner
            .samples
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("sample {i} out of range")))?;
        Ok((s.input.shape().to_vec(), s.input.data().to_vec(), s.label.iter().collect()))
    }
}

/// A trained segmenter loaded from a checkpoint directory.
#[pyclass(name = "Segmenter", frozen)]
struct PySegmenter {
    inner: Segmenter,
}

#[pymethods]
impl PySegmenter {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = load_checkpoint(path).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Per-pixel class predictions for a flat `h x w x c` image.
    fn predict(&self, input: Vec<f64>, h: usize, w: usize, c: usize) -> PyResult<Vec<Option<usize>>> {
        let x = Tensor::new(vec![h, w, c], input).map_err(value_err)?;
        Ok(metrics::predict(&self.inner, &x).map_err(value_err)?.iter().collect())
    }

    /// `(per-class IoU, mIoU, pixel accuracy)` on a dataset.
    fn evaluate(&self, dataset: &PyDataset) -> PyResult<(Vec<Option<f64>>, f64, f64)> {
        let r = metrics::evaluate(&self.inner, &dataset.inner).map_err(value_err)?;
        Ok((r.per_class, r.miou, r.pixel_accuracy))
    }
}

#[pymodule]
fn pyclustalign(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(poly_lr, m)?)?;
    m.add_function(wrap_pyfunction!(select_prototype, m)?)?;
    m.add_function(wrap_pyfunction!(ncut_loss, m)?)?;
    m.add_function(wrap_pyfunction!(hard_ncut_value, m)?)?;
    m.add_function(wrap_pyfunction!(check_grads, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PySegmenter>()?;
    Ok(())
}
