//! Python bindings. Structured results (reports, presets, comparison rows)
//! cross the boundary as plain dicts and lists.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use moesim::engine::{self, SimConfig, Strategy};
use moesim::fabric::MeshTopology;
use moesim::profiler::{self, CoactivationNormalizer, Heatmap};
use moesim::trace::{self, PhaseFilter, SynthParams};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (s,))
}

/// Parses a snake_case enum name through its serde representation.
fn parse_name<T: DeserializeOwned>(what: &str, s: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} {s:?}")))
}

fn rows(h: &Heatmap) -> Vec<Vec<f64>> {
    h.rows().map(<[f64]>::to_vec).collect()
}

#[pyclass(name = "ModelSpec", module = "moesim_py", skip_from_py_object)]
#[derive(Clone)]
struct PyModelSpec {
    inner: trace::ModelSpec,
}

#[pymethods]
impl PyModelSpec {
    #[new]
    #[pyo3(signature = (preset = "qwen3", *, moe_layers = None, num_experts = None, top_k = None))]
    fn new(
        preset: &str,
        moe_layers: Option<usize>,
        num_experts: Option<usize>,
        top_k: Option<usize>,
    ) -> PyResult<Self> {
        let mut m = trace::ModelSpec::by_name(preset)
            .ok_or_else(|| PyValueError::new_err(format!("unknown model preset {preset:?}")))?;
        if let Some(n) = moe_layers {
            m = m.truncated(n);
        }
        if let Some(e) = num_experts {
            m.num_experts = e;
        }
        if let Some(k) = top_k {
            m.top_k = k;
        }
        m.validate().map_err(value_err)?;
        Ok(Self { inner: m })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn num_experts(&self) -> usize {
        self.inner.num_experts
    }

    #[getter]
    fn top_k(&self) -> usize {
        self.inner.top_k
    }

    #[getter]
    fn num_moe_layers(&self) -> usize {
        self.inner.num_moe_layers()
    }

    #[getter]
    fn expert_bytes(&self) -> u64 {
        self.inner.expert_bytes
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelSpec(name={:?}, moe_layers={}, num_experts={}, top_k={})",
            self.inner.name,
            self.inner.num_moe_layers(),
            self.inner.num_experts,
            self.inner.top_k
        )
    }
}

#[pyclass(name = "TraceSet", module = "moesim_py")]
struct PyTraceSet {
    inner: trace::TraceSet,
}

#[pymethods]
impl PyTraceSet {
    /// Deterministic synthetic trace.
    #[staticmethod]
    #[pyo3(signature = (
        spec, *, num_requests = 16, tokens_per_request = 16, prefill_tokens = 0,
        zipf_s = 0.0, stickiness = 0.0, layer_coupling = 0.0, mirror_prefill = false, seed = 0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn synthetic(
        spec: &PyModelSpec,
        num_requests: usize,
        tokens_per_request: usize,
        prefill_tokens: usize,
        zipf_s: f64,
        stickiness: f64,
        layer_coupling: f64,
        mirror_prefill: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let p = SynthParams {
            num_requests,
            tokens_per_request,
            prefill_tokens,
            mirror_prefill,
            zipf_s,
            stickiness,
            layer_coupling,
            seed,
            ..Default::default()
        };
        let inner = trace::generate_synthetic(&spec.inner, &p).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Reads a JSONL trace (optionally gzipped). Lenient loading drops bad
    /// records and returns how many were skipped alongside the trace.
    #[staticmethod]
    #[pyo3(signature = (path, spec, lenient = false))]
    fn load(path: &str, spec: &PyModelSpec, lenient: bool) -> PyResult<(Self, usize)> {
        if lenient {
            let out = trace::load_traces_lenient(path, &spec.inner).map_err(value_err)?;
            Ok((Self { inner: out.traces }, out.skipped.len()))
        } else {
            let inner = trace::load_traces(path, &spec.inner).map_err(value_err)?;
            Ok((Self { inner }, 0))
        }
    }

    fn save(&self, path: &str) -> PyResult<()> {
        trace::save_traces(&self.inner, path).map_err(value_err)
    }

    #[getter]
    fn model(&self) -> PyModelSpec {
        PyModelSpec {
            inner: self.inner.model.clone(),
        }
    }

    fn token_count(&self) -> usize {
        self.inner.token_count()
    }

    fn request_ids(&self) -> Vec<String> {
        self.inner
            .requests
            .iter()
            .map(|r| r.request_id.clone())
            .collect()
    }

    /// `[token][layer] -> experts` for one request.
    fn selections(&self, index: usize) -> PyResult<Vec<Vec<Vec<u32>>>> {
        let r =
            self.inner.requests.get(index).ok_or_else(|| {
                PyValueError::new_err(format!("request index {index} out of range"))
            })?;
        Ok(r.tokens.iter().map(|t| t.selections.clone()).collect())
    }

    fn __len__(&self) -> usize {
        self.inner.requests.len()
    }
}

fn phase(s: &str) -> PyResult<PhaseFilter> {
    s.parse().map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (ts, layer, phase_filter = "both"))]
fn cross_layer_heatmap(
    ts: &PyTraceSet,
    layer: usize,
    phase_filter: &str,
) -> PyResult<Vec<Vec<f64>>> {
    let h =
        profiler::cross_layer_heatmap(&ts.inner, layer, phase(phase_filter)?).map_err(value_err)?;
    Ok(rows(&h))
}

#[pyfunction]
#[pyo3(signature = (ts, layer, phase_filter = "both"))]
fn cross_token_heatmap(
    ts: &PyTraceSet,
    layer: usize,
    phase_filter: &str,
) -> PyResult<Vec<Vec<f64>>> {
    let h =
        profiler::cross_token_heatmap(&ts.inner, layer, phase(phase_filter)?).map_err(value_err)?;
    Ok(rows(&h))
}

#[pyfunction]
#[pyo3(signature = (ts, layer, phase_filter = "both", normalizer = "random_pair"))]
fn coactivation_heatmap(
    ts: &PyTraceSet,
    layer: usize,
    phase_filter: &str,
    normalizer: &str,
) -> PyResult<Vec<Vec<f64>>> {
    let norm: CoactivationNormalizer = parse_name("normalizer", normalizer)?;
    let h = profiler::coactivation_heatmap(&ts.inner, layer, phase(phase_filter)?, norm)
        .map_err(value_err)?;
    Ok(rows(&h))
}

/// Per-expert activation counts divided by their mean.
#[pyfunction]
#[pyo3(signature = (ts, layer, phase_filter = "both"))]
fn expert_frequency(ts: &PyTraceSet, layer: usize, phase_filter: &str) -> PyResult<Vec<f64>> {
    let f =
        profiler::expert_frequency(&ts.inner, layer, phase(phase_filter)?).map_err(value_err)?;
    Ok(f.normalized)
}

/// Rank correlation with average ranks for ties; `None` when either side is constant.
#[pyfunction]
fn spearman_rho(a: Vec<f64>, b: Vec<f64>) -> PyResult<Option<f64>> {
    profiler::spearman_rho_values(&a, &b).map_err(value_err)
}

#[pyfunction]
fn cumulative_top_fraction(values: Vec<f64>, fraction: f64) -> PyResult<f64> {
    profiler::cumulative_top_fraction(&values, fraction).map_err(value_err)
}

#[pyfunction]
fn topology_preset<'py>(py: Python<'py>, name: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &MeshTopology::preset_by_name(name).map_err(value_err)?)
}

#[pyclass(name = "RunReport", module = "moesim_py", from_py_object)]
#[derive(Clone)]
struct PyRunReport {
    inner: engine::RunReport,
}

#[pymethods]
impl PyRunReport {
    #[getter]
    fn strategy(&self) -> &'static str {
        self.inner.strategy().as_str()
    }

    #[getter]
    fn throughput(&self) -> f64 {
        self.inner.throughput
    }

    #[getter]
    fn tokens_generated(&self) -> u64 {
        self.inner.tokens_generated
    }

    #[getter]
    fn hops(&self) -> u64 {
        self.inner.totals.hops
    }

    #[getter]
    fn time(&self) -> f64 {
        self.inner.totals.time
    }

    /// `{local_read, remote_read, local_write}` shares of DRAM traffic.
    fn dram<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.dram)
    }

    fn predictor<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.predictor)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(value_err)
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        let inner = serde_json::from_str(s).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn __repr__(&self) -> String {
        format!(
            "RunReport(strategy={}, throughput={:.6e}, hops={})",
            self.strategy(),
            self.inner.throughput,
            self.inner.totals.hops
        )
    }
}

/// Simulates decode serving of `ts` under one strategy.
#[pyfunction]
#[pyo3(signature = (ts, strategy = "base", *, topology = "dojo", batch_size = 256, max_steps = None, seed = 0))]
fn simulate(
    py: Python<'_>,
    ts: &PyTraceSet,
    strategy: &str,
    topology: &str,
    batch_size: usize,
    max_steps: Option<usize>,
    seed: u64,
) -> PyResult<PyRunReport> {
    let strategy: Strategy = strategy.parse().map_err(value_err)?;
    let topo = MeshTopology::preset_by_name(topology).map_err(value_err)?;
    let mut cfg = SimConfig::new(topo, ts.inner.model.clone(), strategy, batch_size);
    cfg.max_steps = max_steps;
    cfg.seed = seed;
    let traces = &ts.inner;
    let inner = py.detach(|| engine::run(traces, &cfg)).map_err(value_err)?;
    Ok(PyRunReport { inner })
}

/// Comparison rows relative to the `base` report, one dict per strategy.
#[pyfunction]
fn compare<'py>(py: Python<'py>, reports: Vec<PyRunReport>) -> PyResult<Bound<'py, PyAny>> {
    let reports: Vec<engine::RunReport> = reports.into_iter().map(|r| r.inner).collect();
    let table = engine::compare(&reports).map_err(value_err)?;
    to_py(py, &table.rows)
}

#[pymodule]
fn moesim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelSpec>()?;
    m.add_class::<PyTraceSet>()?;
    m.add_class::<PyRunReport>()?;
    m.add_function(wrap_pyfunction!(cross_layer_heatmap, m)?)?;
    m.add_function(wrap_pyfunction!(cross_token_heatmap, m)?)?;
    m.add_function(wrap_pyfunction!(coactivation_heatmap, m)?)?;
    m.add_function(wrap_pyfunction!(expert_frequency, m)?)?;
    m.add_function(wrap_pyfunction!(spearman_rho, m)?)?;
    m.add_function(wrap_pyfunction!(cumulative_top_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(topology_preset, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add(
        "STRATEGIES",
        Strategy::ALL.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
    )?;
    Ok(())
}
