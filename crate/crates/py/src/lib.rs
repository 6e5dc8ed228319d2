//! Python bindings for the `mixnoise` pipeline.
//!
//! Matrices cross the boundary as lists of rows. Configuration structs are
//! passed as dicts and decoded with the same field names as the TOML configs.

use mixnoise::clusterkit;
use mixnoise::evalstats::{self, Variance};
use mixnoise::netcore;
use mixnoise::objective;
use mixnoise::robusttrain::{self, RobustConfig};
use mixnoise::synthdata::{self, NoiseStructure};
use mixnoise::transition::{self, EstimationConfig};
use mixnoise::{ClassifierParams, Error, Origin, Split, TrainConfig};
use ndarray::Array2;
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Shape(_) => PyValueError::new_err(e.to_string()),
        Error::Dependency(_) => PyFileNotFoundError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_array(rows: &[Vec<f64>]) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Decodes a config dict (missing keys take their defaults).
fn config<T: DeserializeOwned + Default>(py: Python<'_>, cfg: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    match cfg {
        None => Ok(T::default()),
        Some(d) => {
            let text: String = py.import("json")?.call_method1("dumps", (d,))?.extract()?;
            serde_json::from_str(&text).map_err(json_err)
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(json_err)
}

fn parse_split(s: &str) -> PyResult<Split> {
    Split::parse(s).ok_or_else(|| PyValueError::new_err(format!("unknown split `{s}` (train, val or test)")))
}

#[pyclass(frozen, name = "MixtureSpec")]
struct PyMixtureSpec(synthdata::MixtureSpec);

#[pymethods]
impl PyMixtureSpec {
    /// Class `i` at `separation · e_i`, `p` open populations opposite the classes.
    #[staticmethod]
    fn separated(c: usize, d: usize, p: usize, separation: f64) -> PyResult<Self> {
        synthdata::MixtureSpec::separated(c, d, p, separation).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let spec: synthdata::MixtureSpec = serde_json::from_str(text).map_err(json_err)?;
        spec.validate().map_err(py_err)?;
        Ok(Self(spec))
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.0)
    }

    #[getter]
    fn c(&self) -> usize {
        self.0.c
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.d
    }

    #[getter]
    fn means(&self) -> Vec<Vec<f64>> {
        self.0.means.clone()
    }

    fn __repr__(&self) -> String {
        format!("MixtureSpec(c={}, d={}, open_populations={})", self.0.c, self.0.d, self.0.open_populations())
    }
}

#[pyclass(frozen, name = "NoiseSpec")]
struct PyNoiseSpec(synthdata::NoiseSpec);

#[pymethods]
impl PyNoiseSpec {
    #[staticmethod]
    fn class_dependent(tau: f64, rho: f64, seed: u64) -> PyResult<Self> {
        let spec = synthdata::NoiseSpec::class_dependent(tau, rho, seed);
        spec.validate().map_err(py_err)?;
        Ok(Self(spec))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let spec: synthdata::NoiseSpec = serde_json::from_str(text).map_err(json_err)?;
        spec.validate().map_err(py_err)?;
        Ok(Self(spec))
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.0)
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.0.tau
    }

    #[getter]
    fn rho(&self) -> f64 {
        self.0.rho
    }

    /// Analytic extended matrix for `c` classes with uniform priors.
    fn true_matrix(&self, c: usize) -> PyResult<PyMatrix> {
        synthdata::true_extended_matrix(&self.0, c).map(PyMatrix).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("NoiseSpec(tau={}, rho={}, seed={})", self.0.tau, self.0.rho, self.0.seed)
    }
}

#[pyclass(frozen, name = "Dataset")]
struct PyDataset(synthdata::Dataset);

#[pymethods]
impl PyDataset {
    /// Clean sample of `n` points with train/val/test tags.
    #[staticmethod]
    fn generate(spec: &PyMixtureSpec, n: usize, seed: u64) -> PyResult<Self> {
        synthdata::generate_mixture(&spec.0, n, seed).map(Self).map_err(py_err)
    }

    /// Mixed-noise copy; open-set replacements come from a reservoir drawn with `seed`.
    fn corrupt(&self, noise: &PyNoiseSpec, spec: &PyMixtureSpec, seed: u64) -> PyResult<Self> {
        let reservoir = synthdata::generate_reservoir(&spec.0, synthdata::reservoir_size(&spec.0, self.0.n()), seed)
            .map_err(py_err)?;
        let out = match noise.0.structure {
            NoiseStructure::ClassDependent => synthdata::inject_mixed_noise(&self.0, &noise.0, &reservoir),
            NoiseStructure::RegionDependent => synthdata::inject_region_noise(&self.0, &noise.0, Some(&reservoir)),
        };
        out.map(Self).map_err(py_err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.d()
    }

    #[getter]
    fn c(&self) -> usize {
        self.0.c
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        to_rows(&self.0.features)
    }

    /// Labels in `0..=c`; `c` marks open-set points.
    #[getter]
    fn clean_labels(&self) -> Vec<usize> {
        self.0.clean_labels.clone()
    }

    #[getter]
    fn noisy_labels(&self) -> Vec<usize> {
        self.0.noisy_labels.clone()
    }

    #[getter]
    fn split(&self) -> Vec<&'static str> {
        self.0.split.iter().map(|s| s.as_str()).collect()
    }

    fn indices(&self, split: &str) -> PyResult<Vec<usize>> {
        Ok(self.0.indices(parse_split(split)?))
    }

    /// Clean-to-noisy frequencies over one split.
    fn empirical_matrix(&self, split: &str) -> PyResult<PyMatrix> {
        let idx = self.0.indices(parse_split(split)?);
        synthdata::empirical_extended_matrix(&self.0, &idx).map(PyMatrix).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.n()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, d={}, c={})", self.0.n(), self.0.d(), self.0.c)
    }
}

#[pyclass(frozen, name = "ExtendedTransitionMatrix")]
struct PyMatrix(transition::ExtendedTransitionMatrix);

#[pymethods]
impl PyMatrix {
    /// From `c + 1` stochastic rows of length `c`, the last being the meta row.
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        transition::ExtendedTransitionMatrix::from_rows(&rows, Origin::Estimated).map(Self).map_err(py_err)
    }

    #[getter]
    fn c(&self) -> usize {
        self.0.c()
    }

    #[getter]
    fn entries(&self) -> Vec<Vec<f64>> {
        to_rows(self.0.entries())
    }

    #[getter]
    fn meta_row(&self) -> Vec<f64> {
        self.0.meta_row()
    }

    /// `Tᵀg` for a `(c+1)`-dimensional clean posterior `g`.
    fn noisy_posterior(&self, g: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.noisy_posterior(&g).map_err(py_err)
    }

    /// Entrywise L1 distance to `other`.
    fn l1(&self, other: &PyMatrix) -> PyResult<f64> {
        transition::l1_error(&self.0, &other.0).map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.0)
    }

    fn __repr__(&self) -> String {
        format!("ExtendedTransitionMatrix(c={}, origin={:?})", self.0.c(), self.0.origin())
    }
}

#[pyclass(frozen, name = "TransitionBundle")]
struct PyBundle(transition::TransitionBundle);

#[pymethods]
impl PyBundle {
    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    #[getter]
    fn matrices(&self) -> Vec<PyMatrix> {
        self.0.matrices.iter().cloned().map(PyMatrix).collect()
    }

    /// Matrix index each row of `x` routes to.
    #[pyo3(signature = (x, warmup=None))]
    fn routes(&self, x: Vec<Vec<f64>>, warmup: Option<&PyClassifier>) -> PyResult<Vec<usize>> {
        let x = to_array(&x)?;
        self.0.routes(warmup.map(|w| &w.0), x.view()).map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.0)
    }

    fn __repr__(&self) -> String {
        format!("TransitionBundle(k={}, c={})", self.0.k(), self.0.c())
    }
}

#[pyclass(frozen, name = "Classifier")]
struct PyClassifier(ClassifierParams);

#[pymethods]
impl PyClassifier {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(Self).map_err(json_err)
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.0)
    }

    #[getter]
    fn sizes(&self) -> Vec<usize> {
        self.0.sizes()
    }

    fn predict_proba(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = to_array(&x)?;
        self.0.predict_proba(x.view()).map(|p| to_rows(&p)).map_err(py_err)
    }

    /// Closed-class predictions of a `(c+1)`-output network.
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let x = to_array(&x)?;
        robusttrain::predict_batch(&self.0, x.view()).map_err(py_err)
    }

    /// Accuracy against clean labels on one split.
    #[pyo3(signature = (data, split="test"))]
    fn accuracy(&self, data: &PyDataset, split: &str) -> PyResult<f64> {
        let rows = robusttrain::predict_split(&self.0, &data.0, parse_split(split)?).map_err(py_err)?;
        let (pred, truth): (Vec<usize>, Vec<usize>) = rows.into_iter().map(|(_, p, y)| (p, y)).unzip();
        evalstats::accuracy(&pred, &truth).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Classifier(sizes={:?})", self.0.sizes())
    }
}

/// Fits a `c`-output network on the noisy train split.
#[pyfunction]
#[pyo3(signature = (data, config=None))]
fn train_warmup(py: Python<'_>, data: &PyDataset, config: Option<&Bound<'_, PyDict>>) -> PyResult<PyClassifier> {
    let cfg: TrainConfig = self::config(py, config)?;
    let out = py.detach(|| netcore::train_warmup(&data.0, &cfg)).map_err(py_err)?;
    Ok(PyClassifier(out.params))
}

/// Global extended matrix plus a `k`-matrix cluster-dependent bundle.
#[pyfunction]
#[pyo3(signature = (warmup, data, k=1, config=None))]
fn estimate(
    py: Python<'_>,
    warmup: &PyClassifier,
    data: &PyDataset,
    k: usize,
    config: Option<&Bound<'_, PyDict>>,
) -> PyResult<(PyMatrix, PyBundle)> {
    let cfg: EstimationConfig = self::config(py, config)?;
    let est = py.detach(|| transition::estimate_all(&warmup.0, &data.0, k, &cfg)).map_err(py_err)?;
    Ok((PyMatrix(est.global), PyBundle(est.bundle)))
}

/// Fits a `(c+1)`-output network; `objective` in the config picks the loss.
#[pyfunction]
#[pyo3(signature = (data, bundle=None, warmup=None, config=None))]
fn train_robust(
    py: Python<'_>,
    data: &PyDataset,
    bundle: Option<&PyBundle>,
    warmup: Option<&PyClassifier>,
    config: Option<&Bound<'_, PyDict>>,
) -> PyResult<PyClassifier> {
    let cfg: RobustConfig = self::config(py, config)?;
    let out = py
        .detach(|| robusttrain::train_robust(&data.0, bundle.map(|b| &b.0), warmup.map(|w| &w.0), &cfg))
        .map_err(py_err)?;
    Ok(PyClassifier(out.params))
}

/// Returns `(assignment, centroids, loss)`.
#[pyfunction]
#[pyo3(signature = (points, k, seed=0, max_iters=100))]
fn kmeans(points: Vec<Vec<f64>>, k: usize, seed: u64, max_iters: usize) -> PyResult<(Vec<usize>, Vec<Vec<f64>>, f64)> {
    let x = to_array(&points)?;
    let m = clusterkit::kmeans(x.view(), k, seed, max_iters).map_err(py_err)?;
    Ok((m.assignment, to_rows(&m.centroids), m.loss))
}

#[pyfunction]
fn accuracy(pred: Vec<usize>, truth: Vec<usize>) -> PyResult<f64> {
    evalstats::accuracy(&pred, &truth).map_err(py_err)
}

/// Two-sided independent t-test; returns `(t, df, p)`.
#[pyfunction]
#[pyo3(signature = (a, b, welch=false))]
fn ttest(a: Vec<f64>, b: Vec<f64>, welch: bool) -> PyResult<(f64, f64, f64)> {
    let variance = if welch { Variance::Welch } else { Variance::Pooled };
    let t = evalstats::ttest_independent(&a, &b, variance).map_err(py_err)?;
    Ok((t.t, t.df, t.p))
}

#[pyfunction]
fn ce_loss(probs: Vec<f64>, label: usize) -> PyResult<f64> {
    objective::ce_loss(&probs, label).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (g, label, t, epsilon=objective::DEFAULT_EPSILON))]
fn forward_loss(g: Vec<f64>, label: usize, t: &PyMatrix, epsilon: f64) -> PyResult<f64> {
    objective::forward_loss(&g, label, &t.0, epsilon).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (g, label, t, epsilon=objective::DEFAULT_EPSILON))]
fn importance_weight(g: Vec<f64>, label: usize, t: &PyMatrix, epsilon: f64) -> PyResult<f64> {
    objective::importance_weight(&g, label, &t.0, epsilon).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (g, label, t, epsilon=objective::DEFAULT_EPSILON))]
fn reweighted_loss(g: Vec<f64>, label: usize, t: &PyMatrix, epsilon: f64) -> PyResult<f64> {
    objective::reweighted_loss(&g, label, &t.0, epsilon).map_err(py_err)
}

#[pymodule]
fn mixnoise_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyMixtureSpec>()?;
    m.add_class::<PyNoiseSpec>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyMatrix>()?;
    m.add_class::<PyBundle>()?;
    m.add_class::<PyClassifier>()?;
    m.add_function(wrap_pyfunction!(train_warmup, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(train_robust, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(ttest, m)?)?;
    m.add_function(wrap_pyfunction!(ce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(forward_loss, m)?)?;
    m.add_function(wrap_pyfunction!(importance_weight, m)?)?;
    m.add_function(wrap_pyfunction!(reweighted_loss, m)?)?;
    Ok(())
}
