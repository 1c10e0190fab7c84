//! Python bindings. Structured results come back as plain dicts and lists.

use std::fs;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::Serialize;
use serde_json::json;

use ::swarmsync::batch::{run_batch, BatchOptions};
use ::swarmsync::burst::{self, BurstScenario, DEFAULT_PERCENTILE};
use ::swarmsync::metrics::{self, SyncRule};
use ::swarmsync::rate_model::{self, SwarmState};
use ::swarmsync::sim::{self, EventTrace, ScenarioConfig};
use ::swarmsync::validation::{self, Protocol};

fn err(e: ::swarmsync::Error) -> PyErr {
    match e {
        ::swarmsync::Error::Simulation(_) | ::swarmsync::Error::OracleDiverged(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(PyModule::import(py, "json")?.call_method1("loads", (text,))?.unbind())
}

fn parse_config(config: &str) -> PyResult<ScenarioConfig> {
    ScenarioConfig::from_json(config).map_err(err)
}

#[pyfunction]
fn max_download_rate(n: usize, seed_capacity: f64, leecher_capacity: f64) -> PyResult<f64> {
    rate_model::max_download_rate(n, seed_capacity, leecher_capacity).map_err(err)
}

/// Rates for one swarm state. `leecher_capacity` is a float or one value per leecher.
#[pyfunction]
#[pyo3(signature = (piece_counts, seed_capacity, leecher_capacity, seed_present = true))]
fn compute_rates(
    py: Python<'_>,
    piece_counts: Vec<u64>,
    seed_capacity: f64,
    leecher_capacity: &Bound<'_, PyAny>,
    seed_present: bool,
) -> PyResult<Py<PyAny>> {
    let caps: Vec<f64> = match leecher_capacity.extract::<f64>() {
        Ok(c) => vec![c; piece_counts.len()],
        Err(_) => leecher_capacity.extract()?,
    };
    let state = SwarmState::new(piece_counts, seed_capacity, caps, seed_present).map_err(err)?;
    let u = rate_model::compute_rates(&state).map_err(err)?;
    let g = rate_model::compute_interest_bounds(&state, &u).map_err(err)?;
    let n = u.len();
    let bounds: Vec<Vec<Option<f64>>> = (0..n).map(|i| (0..n).map(|j| g.get(i, j).finite()).collect()).collect();
    to_py(py, &json!({"u": u.u, "seed_share": u.seed_share, "d": u.d, "g": bounds}))
}

#[pyfunction]
#[pyo3(signature = (arrival_rate, seed_capacity, leecher_capacity, content_size = 256000.0, percentile = DEFAULT_PERCENTILE))]
fn predict_bounds(
    py: Python<'_>,
    arrival_rate: f64,
    seed_capacity: f64,
    leecher_capacity: f64,
    content_size: f64,
    percentile: f64,
) -> PyResult<Py<PyAny>> {
    let mut sc = BurstScenario::new(arrival_rate, seed_capacity, leecher_capacity, content_size);
    sc.percentile = percentile;
    let b = burst::predict_bounds(&sc).map_err(err)?;
    let mut v = serde_json::to_value(&b).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    v["b_min_ratio"] = json!(b.b_min_ratio());
    v["b_max_ratio"] = json!(b.b_max_ratio());
    to_py(py, &v)
}

#[pyfunction]
fn poisson_quantile(mean: f64, p: f64) -> PyResult<u64> {
    burst::poisson_quantile(mean, p).map_err(err)
}

/// Runs a scenario (JSON text) to its end. Returns leecher summaries, totals and,
/// when `trace_path` is given, writes the event trace there as CSV.
#[pyfunction]
#[pyo3(signature = (config, trace_path = None))]
fn simulate(py: Python<'_>, config: &str, trace_path: Option<&str>) -> PyResult<Py<PyAny>> {
    let cfg = parse_config(config)?;
    let run = py.detach(|| sim::run(cfg)).map_err(err)?;
    if let Some(path) = trace_path {
        let f = fs::File::create(path).map_err(|e| PyValueError::new_err(e.to_string()))?;
        run.trace.write_csv(f).map_err(err)?;
    }
    to_py(py, &json!({"leechers": run.leechers, "metadata": run.metadata}))
}

/// Replicated runs with pooled metrics; files go under `out_dir` if given.
#[pyfunction]
#[pyo3(signature = (config, replications = 1, base_seed = None, out_dir = None))]
fn run_replications(
    py: Python<'_>,
    config: &str,
    replications: u32,
    base_seed: Option<u64>,
    out_dir: Option<String>,
) -> PyResult<Py<PyAny>> {
    let cfg = parse_config(config)?;
    let opts = BatchOptions {
        replications,
        base_seed,
        threads: None,
        out_dir: out_dir.map(Into::into),
        sync_rule: SyncRule::default(),
    };
    let summary = py.detach(|| run_batch(&cfg, None, &opts)).map_err(err)?;
    let mut v = serde_json::to_value(&summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    v["gaps_below_10s"] = json!(summary.interdeparture.fraction_below(10.0));
    to_py(py, &v)
}

/// Swarm state (piece counts, capacities) at time `at`, plus piece bitmaps as lists.
#[pyfunction]
fn snapshot_state(py: Python<'_>, config: &str, at: f64) -> PyResult<Py<PyAny>> {
    let (state, bitmaps) = sim::snapshot_state(parse_config(config)?, at).map_err(err)?;
    let pieces: Vec<Vec<u32>> = bitmaps.iter().map(|b| b.iter().collect()).collect();
    to_py(py, &json!({"state": state, "pieces": pieces}))
}

/// Compares simulated and model rates. Without arrivals the five-leecher
/// reference protocol is used.
#[pyfunction]
#[pyo3(signature = (arrivals = None, seed_capacity = 64.0, leecher_capacity = 64.0))]
fn validate(
    py: Python<'_>,
    arrivals: Option<Vec<f64>>,
    seed_capacity: f64,
    leecher_capacity: f64,
) -> PyResult<Py<PyAny>> {
    let p = match arrivals {
        Some(a) => Protocol::with_arrivals(a, seed_capacity, leecher_capacity),
        None => Protocol::reference(),
    };
    let report = py.detach(|| validation::validate(&p)).map_err(err)?;
    to_py(py, &report)
}

/// Metrics of a trace CSV written by `simulate`.
#[pyfunction]
#[pyo3(signature = (trace_path, warmup = 0.0))]
fn trace_metrics(py: Python<'_>, trace_path: &str, warmup: f64) -> PyResult<Py<PyAny>> {
    let f = fs::File::open(trace_path).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let trace = EventTrace::read_csv(f).map_err(err)?;
    let stats = metrics::download_time_stats(&trace, warmup).map_err(err)?;
    let ccdf = metrics::interdeparture_ccdf(&trace, warmup).map_err(err)?;
    let order = metrics::arrival_order_stats(&trace, warmup).map_err(err)?;
    to_py(
        py,
        &json!({
            "download_times": stats,
            "interdeparture": ccdf,
            "gaps_below_10s": ccdf.fraction_below(10.0),
            "arrival_order": order,
        }),
    )
}

/// Step-by-step simulator.
#[pyclass(unsendable)]
struct Simulator {
    inner: sim::Simulator,
}

#[pymethods]
impl Simulator {
    #[new]
    fn new(config: &str) -> PyResult<Self> {
        Ok(Self {
            inner: sim::Simulator::new(parse_config(config)?).map_err(err)?,
        })
    }

    #[getter]
    fn now(&self) -> f64 {
        self.inner.now()
    }

    #[getter]
    fn seed_on(&self) -> bool {
        self.inner.seed_on()
    }

    fn is_finished(&self) -> bool {
        self.inner.is_finished()
    }

    fn advance_to(&mut self, t: f64) -> PyResult<()> {
        self.inner.advance_to(t).map_err(err)
    }

    fn step(&mut self) -> PyResult<bool> {
        self.inner.step().map_err(err)
    }

    fn downloading(&self) -> Vec<u32> {
        self.inner.downloading()
    }

    fn pieces(&self, id: u32) -> Option<u32> {
        self.inner.bitmap(id).map(|b| b.count())
    }

    /// kB received, including partial progress of in-flight pieces.
    fn received(&self, id: u32) -> f64 {
        self.inner.received(id)
    }

    fn snapshot(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.snapshot())
    }

    fn check_invariants(&self) -> PyResult<()> {
        self.inner.check_invariants().map_err(err)
    }
}

#[pymodule(name = "swarmsync")]
fn swarmsync_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(max_download_rate, m)?)?;
    m.add_function(wrap_pyfunction!(compute_rates, m)?)?;
    m.add_function(wrap_pyfunction!(predict_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(poisson_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_replications, m)?)?;
    m.add_function(wrap_pyfunction!(snapshot_state, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(trace_metrics, m)?)?;
    m.add_class::<Simulator>()?;
    Ok(())
}
