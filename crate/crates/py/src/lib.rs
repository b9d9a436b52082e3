//! Python bindings for the `gpumux` library.

use std::fs::File;
use std::io::BufWriter;

use gpumux::analytic_model::{knee_from_curve, AnalyticDnn};
use gpumux::batch_optimizer::{OptimizationProblem, Optimum, DEFAULT_MARGIN_PCT};
use gpumux::profiles::{self, knee_from_profile};
use gpumux::schedulers::{self, DstackOptions, IdealInstance, DEFAULT_SLOT_US};
use gpumux::simulator;
use pyo3::exceptions::{PyIOError, PyKeyError, PyOverflowError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn py_err(e: gpumux::Error) -> PyErr {
    match e {
        gpumux::Error::Io(_) => PyIOError::new_err(e.to_string()),
        gpumux::Error::Oversubscribed(_) => PyOverflowError::new_err(e.to_string()),
        gpumux::Error::GuardExceeded { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn create(path: &str) -> PyResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| PyIOError::new_err(format!("{path}: {e}")))
}

/// Per-model serving configuration.
#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: profiles::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (name, knee_pct, slo_ms, batch, runtime_ms, share_weight = 1.0))]
    fn new(name: &str, knee_pct: f64, slo_ms: f64, batch: u32, runtime_ms: f64, share_weight: f64) -> PyResult<Self> {
        let mut inner = profiles::ModelConfig::new(name, knee_pct, slo_ms, batch, runtime_ms);
        inner.share_weight = share_weight;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }
    #[getter]
    fn knee_pct(&self) -> f64 {
        self.inner.knee_pct
    }
    #[getter]
    fn slo_ms(&self) -> f64 {
        self.inner.slo_ms
    }
    #[getter]
    fn batch(&self) -> u32 {
        self.inner.batch
    }
    #[getter]
    fn runtime_ms(&self) -> f64 {
        self.inner.runtime_ms
    }
    #[getter]
    fn share_weight(&self) -> f64 {
        self.inner.share_weight
    }

    fn __repr__(&self) -> String {
        let m = &self.inner;
        format!(
            "ModelConfig(name={:?}, knee_pct={}, slo_ms={}, batch={}, runtime_ms={})",
            m.name, m.knee_pct, m.slo_ms, m.batch, m.runtime_ms
        )
    }
}

/// Latency profiles keyed by model name.
#[pyclass(name = "ProfileSet")]
struct PyProfileSet {
    inner: profiles::ProfileSet,
}

impl PyProfileSet {
    fn profile(&self, model: &str) -> PyResult<&profiles::ModelProfile> {
        self.inner
            .get(model)
            .ok_or_else(|| PyKeyError::new_err(model.to_string()))
    }
}

#[pymethods]
impl PyProfileSet {
    /// Reads `model,gpu_pct,batch,latency_ms` rows from a CSV file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let f = File::open(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        Ok(Self {
            inner: profiles::ProfileSet::load(f).map_err(py_err)?,
        })
    }

    /// Synthetic profiles for the built-in catalog.
    #[staticmethod]
    fn catalog() -> Self {
        Self {
            inner: profiles::catalog_profiles(),
        }
    }

    fn models(&self) -> Vec<String> {
        self.inner.iter().map(|p| p.name().to_string()).collect()
    }

    fn latency(&self, model: &str, gpu_pct: f64, batch: u32) -> PyResult<f64> {
        self.profile(model)?.latency(gpu_pct, batch).map_err(py_err)
    }

    fn knee(&self, model: &str, batch: u32) -> PyResult<u32> {
        knee_from_profile(self.profile(model)?, batch).map_err(py_err)
    }

    /// Efficacy-maximizing operating point, or `None` when nothing is feasible.
    #[pyo3(signature = (model, slo_ms, rate, margin = DEFAULT_MARGIN_PCT))]
    fn optimize(
        &self,
        py: Python<'_>,
        model: &str,
        slo_ms: f64,
        rate: f64,
        margin: u32,
    ) -> PyResult<Option<Py<PyAny>>> {
        let problem = OptimizationProblem::new(self.profile(model)?.clone(), slo_ms, rate).map_err(py_err)?;
        match gpumux::batch_optimizer::optimize(&problem, margin) {
            Optimum::Found { point, provisioned_pct } => {
                let d = to_py(py, &point)?;
                d.bind(py).set_item("provisioned_pct", provisioned_pct)?;
                Ok(Some(d))
            }
            Optimum::Infeasible { .. } => Ok(None),
        }
    }

    fn write(&self, path: &str) -> PyResult<()> {
        self.inner.write(create(path)?).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Simulation inputs; build from JSON text or a file.
#[pyclass(name = "Scenario", from_py_object)]
#[derive(Clone)]
struct PyScenario {
    inner: simulator::Scenario,
}

#[pymethods]
impl PyScenario {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: simulator::Scenario::from_json(text).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: simulator::Scenario::load(path.as_ref()).map_err(py_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    /// Runs the simulation; the GIL is released meanwhile.
    fn run(&self, py: Python<'_>) -> PyResult<PySimMetrics> {
        let sc = self.inner.clone();
        let inner = py.detach(move || simulator::run(&sc)).map_err(py_err)?;
        Ok(PySimMetrics { inner })
    }
}

/// Results of one simulation.
#[pyclass(name = "SimMetrics")]
struct PySimMetrics {
    inner: simulator::SimMetrics,
}

#[pymethods]
impl PySimMetrics {
    #[getter]
    fn throughput(&self) -> f64 {
        self.inner.total_throughput()
    }
    #[getter]
    fn miss_fraction(&self) -> f64 {
        self.inner.miss_fraction()
    }
    #[getter]
    fn utilization(&self) -> f64 {
        self.inner.mean_utilization()
    }

    /// Per-model counters as a list of dicts.
    fn models(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.models)
    }

    /// Everything, including runs and timelines, as nested dicts.
    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner)
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        self.inner.write_csv(create(path)?).map_err(py_err)
    }

    fn write_utilization_csv(&self, path: &str) -> PyResult<()> {
        self.inner.write_utilization_csv(create(path)?).map_err(py_err)
    }
}

fn configs(models: &[PyModelConfig]) -> Vec<profiles::ModelConfig> {
    models.iter().map(|m| m.inner.clone()).collect()
}

/// The built-in model catalog.
#[pyfunction]
fn catalog() -> Vec<PyModelConfig> {
    profiles::builtin_catalog()
        .into_iter()
        .map(|inner| PyModelConfig { inner })
        .collect()
}

/// Knee SM count of the analytic model with uniform kernels.
#[pyfunction]
#[pyo3(signature = (n1, k_max = 50, t_p = 40.0, t_np = 10.0, batch = 1, max_sms = 100))]
fn analytic_knee(n1: u64, k_max: usize, t_p: f64, t_np: f64, batch: u64, max_sms: u64) -> PyResult<usize> {
    let dnn = AnalyticDnn::uniform(k_max, n1, t_p, t_np).map_err(py_err)?;
    let curve = dnn.latency_curve(batch, max_sms).map_err(py_err)?;
    knee_from_curve(&curve).map_err(py_err)
}

/// D-STACK session schedule as a dict with `runs`, `session_len_ms` and `utilization`.
#[pyfunction]
#[pyo3(signature = (models, slot_us = DEFAULT_SLOT_US, profiles = None))]
fn dstack_schedule(
    py: Python<'_>,
    models: Vec<PyModelConfig>,
    slot_us: u32,
    profiles: Option<PyRef<'_, PyProfileSet>>,
) -> PyResult<Py<PyAny>> {
    let opts = DstackOptions {
        slot_us,
        profiles: profiles.as_ref().map(|p| &p.inner),
        ..DstackOptions::default()
    };
    let plan = schedulers::dstack_schedule(&configs(&models), &opts)
        .and_then(|o| o.into_result())
        .map_err(py_err)?;
    schedule_dict(py, &plan)
}

/// Round-robin temporal schedule over one session.
#[pyfunction]
#[pyo3(signature = (models, slot_us = DEFAULT_SLOT_US))]
fn temporal_schedule(py: Python<'_>, models: Vec<PyModelConfig>, slot_us: u32) -> PyResult<Py<PyAny>> {
    let ms = configs(&models);
    let plan = schedulers::temporal_schedule(&ms, schedulers::session_len(&ms), slot_us);
    schedule_dict(py, &plan)
}

fn schedule_dict(py: Python<'_>, plan: &schedulers::SessionSchedule) -> PyResult<Py<PyAny>> {
    let d = to_py(py, &plan.runs)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("runs", d)?;
    out.set_item("session_len_ms", plan.session_len_ms)?;
    out.set_item("utilization", plan.utilization())?;
    Ok(out.into_any().unbind())
}

/// Proportional shares scaled to fit the GPU.
#[pyfunction]
fn static_spatial(knees: Vec<f64>) -> Vec<f64> {
    schedulers::static_spatial(&knees)
}

/// Weighted max-min shares capped at each knee.
#[pyfunction]
#[pyo3(signature = (knees, max_gpu = 100.0))]
fn wmax_min(knees: Vec<f64>, max_gpu: f64) -> PyResult<Vec<f64>> {
    schedulers::wmax_min(&knees, max_gpu).map_err(py_err)
}

/// Scheduler comparison against the kernel-level oracle; takes instance JSON text.
#[pyfunction]
fn ideal_compare(py: Python<'_>, instance_json: &str) -> PyResult<Py<PyAny>> {
    let inst: IdealInstance = serde_json::from_str(instance_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let rows = py.detach(move || schedulers::ideal_compare(&inst)).map_err(py_err)?;
    to_py(py, &rows)
}

/// Runs several scenarios on `jobs` threads; results keep input order.
#[pyfunction]
#[pyo3(signature = (scenarios, jobs = 1))]
fn run_many(py: Python<'_>, scenarios: Vec<PyScenario>, jobs: usize) -> PyResult<Vec<PySimMetrics>> {
    let scs: Vec<_> = scenarios.into_iter().map(|s| s.inner).collect();
    py.detach(move || simulator::run_many(&scs, jobs))
        .into_iter()
        .map(|r| r.map(|inner| PySimMetrics { inner }).map_err(py_err))
        .collect()
}

#[pymodule]
fn gpumux_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyProfileSet>()?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PySimMetrics>()?;
    m.add_function(wrap_pyfunction!(catalog, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_knee, m)?)?;
    m.add_function(wrap_pyfunction!(dstack_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(temporal_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(static_spatial, m)?)?;
    m.add_function(wrap_pyfunction!(wmax_min, m)?)?;
    m.add_function(wrap_pyfunction!(ideal_compare, m)?)?;
    m.add_function(wrap_pyfunction!(run_many, m)?)?;
    Ok(())
}
