//! Python bindings: models, trimming, streaming sessions and the benchmark
//! harness. Structured values cross the boundary as JSON strings.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tact::harness::{self, Grid};
use tact::linalg::Matrix;
use tact::theory::{self, MRule};
use tact::trim;
use tact::{Observation, Prng, RunConfig, TactConfig};

fn err(e: tact::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Linear feature extractor with a prototype classifier.
#[pyclass(name = "Model", module = "tact_py", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: tact::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(w: Vec<Vec<f64>>, b: Vec<f64>, prototypes: Vec<Vec<f64>>) -> PyResult<Self> {
        let w = Matrix::from_rows(&w).map_err(err)?;
        Ok(PyModel { inner: tact::Model::new(w, b, prototypes).map_err(err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyModel { inner: tact::Model::from_json(text).map_err(err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[getter]
    fn prototypes(&self) -> Vec<Vec<f64>> {
        self.inner.prototypes.clone()
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        (self.inner.d_obs(), self.inner.d(), self.inner.c())
    }

    fn extract(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.extract(&x).map_err(err)
    }

    /// Returns `(class, probabilities)`.
    fn predict(&self, x: Vec<f64>) -> PyResult<(usize, Vec<f64>)> {
        self.inner.predict(&x).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Model(d_obs={}, d={}, c={})", self.inner.d_obs(), self.inner.d(), self.inner.c())
    }
}

/// Streaming TACT state: running trimmed prototypes across batches.
#[pyclass(name = "Session", module = "tact_py")]
struct PySession {
    inner: tact::TactSession,
}

#[pymethods]
impl PySession {
    #[new]
    #[pyo3(signature = (model, n, m, tau = 0.0, include_current_batch = true))]
    fn new(model: &PyModel, n: usize, m: usize, tau: f64, include_current_batch: bool) -> PyResult<Self> {
        let config = TactConfig { n, m, tau, include_current_batch };
        Ok(PySession { inner: tact::TactSession::new(config, &model.inner).map_err(err)? })
    }

    /// `augmented[i]` holds the augmented inputs of `xs[i]`. Returns the
    /// predicted classes and the batch report as JSON.
    fn process_batch(&mut self, model: &PyModel, xs: Vec<Vec<f64>>, augmented: Vec<Vec<Vec<f64>>>) -> PyResult<(Vec<usize>, String)> {
        if xs.len() != augmented.len() {
            return Err(PyValueError::new_err("xs and augmented must have the same length"));
        }
        let batch: Vec<Observation> = xs.into_iter().map(|x| Observation { x, group: 0 }).collect();
        let mut variants = augmented.into_iter();
        let mut augmenter = |_: &Observation| Ok(variants.next().unwrap_or_default());
        let (preds, report) = self.inner.process_batch(&model.inner, &batch, &mut augmenter).map_err(err)?;
        let report = serde_json::to_string(&report).map_err(json_err)?;
        Ok((preds.into_iter().map(|p| p.class).collect(), report))
    }

    #[getter]
    fn running_prototypes(&self) -> Vec<Vec<f64>> {
        self.inner.running_prototypes.clone()
    }

    #[getter]
    fn batch_index(&self) -> usize {
        self.inner.batch_index
    }
}

/// Top-`m` principal directions of `[z; variants]` as `(directions, variances, total_variance)`.
#[pyfunction]
fn identify_noncausal(z: Vec<f64>, variants: Vec<Vec<f64>>, m: usize) -> PyResult<(Vec<Vec<f64>>, Vec<f64>, f64)> {
    let d = trim::identify_noncausal(&z, &variants, m).map_err(err)?;
    Ok((d.dirs, d.variances, d.total_variance))
}

/// Removes the components of `v` along orthonormal `directions`.
#[pyfunction]
fn project_out(v: Vec<f64>, directions: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    tact::linalg::project_out(&v, &directions).map_err(err)
}

/// Eigenvalues (descending) and eigenvectors of a symmetric matrix.
#[pyfunction]
fn sym_eig(matrix: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let e = tact::linalg::sym_eig(&Matrix::from_rows(&matrix).map_err(err)?).map_err(err)?;
    Ok((e.values, e.vectors))
}

#[pyfunction]
fn reference_config() -> PyResult<String> {
    serde_json::to_string(&RunConfig::reference()).map_err(json_err)
}

fn parse_config(config: &str) -> PyResult<RunConfig> {
    RunConfig::from_json(config).map_err(err)
}

#[pyfunction]
fn train(config: &str) -> PyResult<PyModel> {
    let cfg = parse_config(config)?;
    let scm = cfg.validate().map_err(err)?;
    Ok(PyModel { inner: harness::train_model(&cfg, &scm).map_err(err)? })
}

/// Runs the configured mode and returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (config, model = None))]
fn run(py: Python<'_>, config: &str, model: Option<PyModel>) -> PyResult<String> {
    let cfg = parse_config(config)?;
    let report = py
        .detach(|| match &model {
            Some(m) => harness::run_with_model(&cfg, &m.inner),
            None => harness::run_adaptation(&cfg),
        })
        .map_err(err)?;
    serde_json::to_string(&report).map_err(json_err)
}

/// Grid sweep; returns CSV.
#[pyfunction]
#[pyo3(signature = (config, grid, seeds = Vec::new()))]
fn sweep(py: Python<'_>, config: &str, grid: &str, seeds: Vec<u64>) -> PyResult<String> {
    let cfg = parse_config(config)?;
    let grid: Grid = serde_json::from_str(grid).map_err(json_err)?;
    let table = py.detach(|| harness::sweep(&grid, &cfg, &seeds)).map_err(err)?;
    Ok(table.to_csv())
}

/// The four ablation variants; returns CSV.
#[pyfunction]
#[pyo3(signature = (config, seeds = Vec::new()))]
fn ablate(py: Python<'_>, config: &str, seeds: Vec<u64>) -> PyResult<String> {
    let cfg = parse_config(config)?;
    let table = py.detach(|| harness::ablate(&cfg, &seeds)).map_err(err)?;
    Ok(table.to_csv())
}

/// Monte Carlo check of the trimming propositions; returns the summary as JSON.
#[pyfunction]
#[pyo3(signature = (count, d_min = 8, d_max = 8, m = None, seed = 0))]
fn verify(py: Python<'_>, count: usize, d_min: usize, d_max: usize, m: Option<usize>, seed: u64) -> PyResult<String> {
    let rule = m.map_or(MRule::Uniform, MRule::Fixed);
    let summary = py
        .detach(|| theory::verify_implications(count, (d_min, d_max), rule, &mut Prng::new(seed)))
        .map_err(err)?;
    serde_json::to_string(&summary).map_err(json_err)
}

#[pymodule]
fn tact_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PySession>()?;
    m.add_function(wrap_pyfunction!(identify_noncausal, m)?)?;
    m.add_function(wrap_pyfunction!(project_out, m)?)?;
    m.add_function(wrap_pyfunction!(sym_eig, m)?)?;
    m.add_function(wrap_pyfunction!(reference_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
