//! Python bindings: trace sets, simulation, the attack pipeline, TVLA and
//! Grad-CAM.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;
use serde_json::json;

use scaar_core::assess;
use scaar_core::attribution::{default_layer, grad_cam};
use scaar_core::leaksim::{self, simulate_llm as sim_llm};
use scaar_core::nnet::{load_checkpoint, save_checkpoint, Checkpoint, Model};
use scaar_core::pipeline::{self, ExperimentConfig, PreprocessConfig};
use scaar_core::preprocess;
use scaar_core::trace::{read_scar, write_scar, Label, Trace, TraceSet};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn config(json: Option<&str>) -> PyResult<ExperimentConfig> {
    let cfg: ExperimentConfig = match json {
        Some(s) => serde_json::from_str(s).map_err(value_err)?,
        None => ExperimentConfig::default(),
    };
    cfg.check().map_err(value_err)?;
    Ok(cfg)
}

/// Serializable value to plain Python objects.
fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (s,))
}

#[pyclass(name = "TraceSet", module = "scaar")]
struct PyTraceSet {
    inner: TraceSet,
}

#[pymethods]
impl PyTraceSet {
    /// Builds a set from per-trace sample lists and labels.
    #[staticmethod]
    fn from_lists(samples: Vec<Vec<f32>>, labels: Vec<Label>, n_classes: usize) -> PyResult<Self> {
        if samples.len() != labels.len() {
            return Err(value_err("one label per trace"));
        }
        let traces = samples.into_iter().zip(labels).map(|(s, l)| Trace::new(s, l)).collect();
        let inner = TraceSet::from_parts(traces, n_classes, None);
        let fixed = inner.traces().first().map(|t| t.len());
        let inner = if inner.traces().iter().all(|t| Some(t.len()) == fixed) {
            TraceSet::new(inner.into_traces(), n_classes)
        } else {
            inner
        };
        if let Some(v) = inner.validate().first() {
            return Err(value_err(v));
        }
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: read_scar(path).map_err(io_err)?,
        })
    }

    /// Writes the set as a SCAR file; returns the byte count.
    fn write(&self, path: PathBuf) -> PyResult<u64> {
        write_scar(&self.inner, path).map_err(io_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "TraceSet(n={}, n_classes={}, fixed_len={:?})",
            self.inner.len(),
            self.inner.n_classes(),
            self.inner.fixed_len()
        )
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    #[getter]
    fn fixed_len(&self) -> Option<usize> {
        self.inner.fixed_len()
    }

    fn labels(&self) -> Vec<Label> {
        self.inner.labels()
    }

    fn samples(&self, index: usize) -> PyResult<Vec<f32>> {
        self.inner
            .get(index)
            .map(|t| t.samples.clone())
            .ok_or_else(|| PyIndexError::new_err(format!("trace {index} of {}", self.inner.len())))
    }

    fn class_counts(&self) -> Vec<usize> {
        self.inner.class_counts()
    }

    /// Invariant violations as messages; empty when valid.
    fn validate(&self) -> Vec<String> {
        self.inner.validate().iter().map(|v| v.to_string()).collect()
    }
}

/// A trained attack model together with the preprocessing it expects.
#[pyclass(name = "Model", module = "scaar")]
struct PyModel {
    inner: Model<f32>,
    preprocess: PreprocessConfig,
}

#[pymethods]
impl PyModel {
    #[getter]
    fn input_len(&self) -> usize {
        self.inner.input_len()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    /// Predicted class of every (raw) trace.
    fn predict(&self, py: Python<'_>, set: &PyTraceSet) -> PyResult<Vec<Label>> {
        py.detach(|| {
            let prepared = self.preprocess.apply(&set.inner).map_err(value_err)?;
            self.inner.predict(&prepared).map_err(value_err)
        })
    }

    /// Accuracy on a labelled (raw) trace set.
    fn score(&self, py: Python<'_>, set: &PyTraceSet) -> PyResult<f64> {
        let pred = self.predict(py, set)?;
        Ok(pipeline::score(&pred, &set.inner.labels(), self.inner.n_classes()).0)
    }

    /// Grad-CAM relevance of one raw trace, at model resolution.
    #[pyo3(signature = (samples, class_, layer=None))]
    fn grad_cam(&self, samples: Vec<f32>, class_: usize, layer: Option<usize>) -> PyResult<Vec<f64>> {
        let x = self
            .preprocess
            .conditioning
            .apply_samples(&samples)
            .map_err(value_err)?;
        let layer = layer.unwrap_or_else(|| default_layer(&self.inner));
        Ok(grad_cam(&self.inner, &x, class_, layer).map_err(value_err)?.relevance)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ck = Checkpoint {
            model: self.inner.clone(),
            epoch: 0,
            extra: json!({ "preprocess": self.preprocess }),
        };
        save_checkpoint(&ck, path).map_err(io_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(path).map_err(io_err)?;
        let preprocess = serde_json::from_value(ck.extra["preprocess"].clone()).map_err(value_err)?;
        Ok(Self {
            inner: ck.model,
            preprocess,
        })
    }
}

#[pyfunction]
fn hamming_weight(v: u8) -> u32 {
    leaksim::hamming_weight(v)
}

#[pyfunction]
fn welch_t(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    assess::welch_t(&a, &b).map_err(value_err)
}

/// Labelled traces of one session, generated from a JSON config.
#[pyfunction]
#[pyo3(signature = (config=None, session=0))]
fn simulate(py: Python<'_>, config: Option<&str>, session: u64) -> PyResult<PyTraceSet> {
    let cfg = self::config(config)?;
    let inner = py.detach(|| pipeline::generate(&cfg, session)).map_err(value_err)?;
    Ok(PyTraceSet { inner })
}

/// Samples emitted while generating `tokens`.
#[pyfunction]
#[pyo3(signature = (tokens, seed=0, config=None))]
fn simulate_llm(tokens: Vec<u32>, seed: u64, config: Option<&str>) -> PyResult<Vec<f32>> {
    let cfg = self::config(config)?;
    let spec = cfg.llm.build(cfg.leakage).map_err(value_err)?;
    Ok(sim_llm(&tokens, &spec, seed).map_err(value_err)?.samples)
}

/// (profiling, attack) split of a raw set.
#[pyfunction]
#[pyo3(signature = (set, config=None))]
fn split(set: &PyTraceSet, config: Option<&str>) -> PyResult<(PyTraceSet, PyTraceSet)> {
    let cfg = self::config(config)?;
    let (p, a) = pipeline::split_raw(&cfg, &set.inner).map_err(value_err)?;
    Ok((PyTraceSet { inner: p }, PyTraceSet { inner: a }))
}

/// Trains an attack model on raw profiling traces.
#[pyfunction]
#[pyo3(signature = (set, config=None))]
fn profile(py: Python<'_>, set: &PyTraceSet, config: Option<&str>) -> PyResult<PyModel> {
    let mut cfg = self::config(config)?;
    cfg.victim.n_classes = set.inner.n_classes();
    let model = py.detach(|| {
        let prepared = cfg.preprocess.apply(&set.inner).map_err(value_err)?;
        pipeline::profile(&cfg, &prepared).map_err(value_err)
    })?;
    Ok(PyModel {
        inner: model.0,
        preprocess: cfg.preprocess,
    })
}

/// Generate, split, train and attack; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn run_attack<'py>(py: Python<'py>, config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = self::config(config)?;
    let report = py.detach(|| pipeline::run_attack(&cfg)).map_err(value_err)?;
    to_py(py, &report)
}

#[pyfunction]
#[pyo3(signature = (a, b, threshold=4.5))]
fn tvla<'py>(py: Python<'py>, a: &PyTraceSet, b: &PyTraceSet, threshold: f64) -> PyResult<Bound<'py, PyAny>> {
    let report = assess::tvla(&a.inner, &b.inner, threshold).map_err(value_err)?;
    to_py(py, &report)
}

#[pyfunction]
#[pyo3(signature = (set, class_, seed=0))]
fn class_vs_rest(set: &PyTraceSet, class_: Label, seed: u64) -> PyResult<(PyTraceSet, PyTraceSet)> {
    let (a, b) = assess::class_vs_rest(&set.inner, class_, seed).map_err(value_err)?;
    Ok((PyTraceSet { inner: a }, PyTraceSet { inner: b }))
}

#[pyfunction]
fn standardize(samples: Vec<f32>) -> PyResult<Vec<f32>> {
    preprocess::standardize_samples(&samples).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (samples, offset, pad_value=0.0))]
fn shift(samples: Vec<f32>, offset: i64, pad_value: f32) -> PyResult<Vec<f32>> {
    preprocess::shift_samples(&samples, offset, pad_value).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (n, p, level=0.99))]
fn binomial_band(n: usize, p: f64, level: f64) -> PyResult<(f64, f64)> {
    if n == 0 || !(0.0..=1.0).contains(&p) || !(level > 0.0 && level < 1.0) {
        return Err(value_err("need n > 0, p in [0, 1] and level in (0, 1)"));
    }
    Ok(pipeline::binomial_band(n, p, level))
}

#[pymodule]
fn scaar(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTraceSet>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(hamming_weight, m)?)?;
    m.add_function(wrap_pyfunction!(welch_t, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_llm, m)?)?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_function(wrap_pyfunction!(profile, m)?)?;
    m.add_function(wrap_pyfunction!(run_attack, m)?)?;
    m.add_function(wrap_pyfunction!(tvla, m)?)?;
    m.add_function(wrap_pyfunction!(class_vs_rest, m)?)?;
    m.add_function(wrap_pyfunction!(standardize, m)?)?;
    m.add_function(wrap_pyfunction!(shift, m)?)?;
    m.add_function(wrap_pyfunction!(binomial_band, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
