//! Python bindings: parameter sets, datasets, MM fitting, merge chains and
//! selection. Structured results (traces, chains, reports) are returned as
//! plain dicts decoded from their JSON form.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use sgmlmoe::diagnostics::voronoi_loss;
use sgmlmoe::experiment::benchmark_truth;
use sgmlmoe::mixing::{build_chain, from_theta, MixingMeasure};
use sgmlmoe::mm::{init_from_clustering, init_perturbed_truth};
use sgmlmoe::selection::{criterion_scores, dsc_scores, Criterion};
use sgmlmoe::{CovariateSampler, FitOptions, ModelSpec};

fn err(e: sgmlmoe::Error) -> PyErr {
    match e {
        sgmlmoe::Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Model parameters with shape (K experts, M classes, P covariates, degree D).
#[pyclass(module = "sgmlmoe_py", from_py_object)]
#[derive(Clone)]
struct Theta {
    inner: sgmlmoe::Theta,
}

#[pymethods]
impl Theta {
    /// All-zero parameters.
    #[new]
    fn new(k: usize, m: usize, p: usize, d: usize) -> PyResult<Self> {
        let spec = ModelSpec::new(k, m, p, d).map_err(err)?;
        Ok(Theta {
            inner: sgmlmoe::Theta::zeros(spec),
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Theta { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// `(K, M, P, D)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let s = self.inner.spec();
        (s.k, s.m, s.p, s.d)
    }

    /// Flat coefficient vector (gate block first).
    fn to_flat(&self) -> Vec<f64> {
        self.inner.to_flat()
    }

    #[staticmethod]
    fn from_flat(k: usize, m: usize, p: usize, d: usize, flat: Vec<f64>) -> PyResult<Self> {
        let spec = ModelSpec::new(k, m, p, d).map_err(err)?;
        Ok(Theta {
            inner: sgmlmoe::Theta::from_flat(spec, &flat).map_err(err)?,
        })
    }

    /// Class probabilities at one covariate row.
    fn predict_proba(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        sgmlmoe::predict_proba(&self.inner, &x).map_err(err)
    }

    fn log_likelihood(&self, data: &Dataset) -> PyResult<f64> {
        sgmlmoe::log_likelihood(&self.inner, &data.inner).map_err(err)
    }

    /// Mixing-measure form as a dict of atoms.
    fn mixing_measure<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &from_theta(&self.inner))
    }

    fn __repr__(&self) -> String {
        let s = self.inner.spec();
        format!("Theta(K={}, M={}, P={}, D={})", s.k, s.m, s.p, s.d)
    }
}

/// Covariate rows with 1-based class labels.
#[pyclass(module = "sgmlmoe_py", from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: sgmlmoe::Dataset,
}

#[pymethods]
impl Dataset {
    #[new]
    fn new(x: Vec<Vec<f64>>, labels: Vec<usize>, m: usize) -> PyResult<Self> {
        let p = x.first().map_or(1, Vec::len);
        if x.iter().any(|r| r.len() != p) {
            return Err(PyValueError::new_err("all rows must have the same length"));
        }
        let flat = x.into_iter().flatten().collect();
        Ok(Dataset {
            inner: sgmlmoe::Dataset::new(p, m, flat, &labels).map_err(err)?,
        })
    }

    /// Reads `x1..xP,y`; string labels are numbered in sorted order.
    #[staticmethod]
    #[pyo3(signature = (path, m=None))]
    fn from_csv(path: &str, m: Option<usize>) -> PyResult<Self> {
        let loaded = sgmlmoe::io::read_dataset_csv(std::path::Path::new(path), m).map_err(err)?;
        Ok(Dataset { inner: loaded.data })
    }

    fn to_csv(&self, path: &str) -> PyResult<()> {
        sgmlmoe::io::write_dataset_csv(std::path::Path::new(path), &self.inner).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        (0..self.inner.len()).map(|n| self.inner.x_row(n).to_vec()).collect()
    }
}

/// The two-expert, two-class synthetic benchmark model.
#[pyfunction(name = "benchmark_truth")]
fn py_benchmark_truth() -> Theta {
    Theta {
        inner: benchmark_truth(),
    }
}

/// Draws `n` rows with standard-normal covariates.
#[pyfunction]
fn sample_dataset(theta: &Theta, n: usize, seed: u64) -> Dataset {
    Dataset {
        inner: sgmlmoe::sample_dataset(&theta.inner, n, CovariateSampler::StandardNormal, seed),
    }
}

#[pyfunction(name = "init_from_clustering")]
fn py_init_from_clustering(data: &Dataset, k: usize, d: usize, seed: u64) -> PyResult<Theta> {
    let spec = ModelSpec::new(k, data.inner.n_classes(), data.inner.p(), d).map_err(err)?;
    Ok(Theta {
        inner: init_from_clustering(&data.inner, &spec, seed).map_err(err)?,
    })
}

#[pyfunction(name = "init_perturbed_truth")]
#[pyo3(signature = (truth, noise, extra_experts=0, seed=0))]
fn py_init_perturbed_truth(truth: &Theta, noise: f64, extra_experts: usize, seed: u64) -> PyResult<Theta> {
    Ok(Theta {
        inner: init_perturbed_truth(&truth.inner, noise, extra_experts, seed).map_err(err)?,
    })
}

/// Runs the MM algorithm; returns the fitted parameters and the trace dict.
#[pyfunction]
#[pyo3(signature = (theta, data, tol=None, max_iters=1000, ridge=1e-8, extrapolate=false))]
fn fit_mm<'py>(
    py: Python<'py>,
    theta: &Theta,
    data: &Dataset,
    tol: Option<f64>,
    max_iters: usize,
    ridge: f64,
    extrapolate: bool,
) -> PyResult<(Theta, Bound<'py, PyAny>)> {
    let opts = FitOptions {
        tol,
        max_iters,
        ridge,
        record_trace: false,
        extrapolate,
    };
    let (t0, d) = (theta.inner.clone(), data.inner.clone());
    let (fitted, trace) = py.detach(move || sgmlmoe::fit_mm(&t0, &d, &opts)).map_err(err)?;
    Ok((Theta { inner: fitted }, to_py(py, &trace)?))
}

fn measure_of(obj: &Bound<'_, PyAny>) -> PyResult<MixingMeasure> {
    if let Ok(t) = obj.extract::<PyRef<'_, Theta>>() {
        return Ok(from_theta(&t.inner));
    }
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Merge chain of a fitted model (or mixing-measure dict), with per-level
/// mean log-likelihoods when `data` is given.
#[pyfunction(name = "build_chain")]
#[pyo3(signature = (model, data=None, include_single=false))]
fn py_build_chain<'py>(
    py: Python<'py>,
    model: &Bound<'py, PyAny>,
    data: Option<&Dataset>,
    include_single: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let g = measure_of(model)?;
    let chain = build_chain(&g, data.map(|d| &d.inner), include_single).map_err(err)?;
    to_py(py, &chain)
}

/// DSC report for one over-specified fit.
#[pyfunction]
#[pyo3(signature = (model, data, omega=None))]
fn select_dsc<'py>(
    py: Python<'py>,
    model: &Bound<'py, PyAny>,
    data: &Dataset,
    omega: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let g = measure_of(model)?;
    let chain = build_chain(&g, Some(&data.inner), false).map_err(err)?;
    to_py(py, &dsc_scores(&chain, data.inner.len(), omega).map_err(err)?)
}

/// AIC, BIC or ICL report over fits with different expert counts.
#[pyfunction]
fn select_criterion<'py>(
    py: Python<'py>,
    fits: Vec<Theta>,
    data: &Dataset,
    criterion: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let c: Criterion = criterion.parse().map_err(err)?;
    let fits: Vec<sgmlmoe::Theta> = fits.into_iter().map(|t| t.inner).collect();
    to_py(py, &criterion_scores(&fits, &data.inner, c).map_err(err)?)
}

/// Voronoi loss report of a fit against the true model.
#[pyfunction(name = "voronoi_loss")]
fn py_voronoi_loss<'py>(py: Python<'py>, fitted: &Theta, truth: &Theta) -> PyResult<Bound<'py, PyAny>> {
    let report = voronoi_loss(&from_theta(&fitted.inner), &from_theta(&truth.inner)).map_err(err)?;
    to_py(py, &report)
}

#[pymodule]
fn sgmlmoe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Theta>()?;
    m.add_class::<Dataset>()?;
    m.add_function(wrap_pyfunction!(py_benchmark_truth, m)?)?;
    m.add_function(wrap_pyfunction!(sample_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(py_init_from_clustering, m)?)?;
    m.add_function(wrap_pyfunction!(py_init_perturbed_truth, m)?)?;
    m.add_function(wrap_pyfunction!(fit_mm, m)?)?;
    m.add_function(wrap_pyfunction!(py_build_chain, m)?)?;
    m.add_function(wrap_pyfunction!(select_dsc, m)?)?;
    m.add_function(wrap_pyfunction!(select_criterion, m)?)?;
    m.add_function(wrap_pyfunction!(py_voronoi_loss, m)?)?;
    Ok(())
}
