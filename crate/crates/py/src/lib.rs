//! Python bindings: traces, the Tamaraw schedule, overheads, pattern mining,
//! leakage bounds and the workspace pipeline.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use tamaraw_core::anonymity::attacker_accuracy as core_attacker_accuracy;
use tamaraw_core::bound;
use tamaraw_core::patterns::{mine_patterns as core_mine, CastConfig};
use tamaraw_core::pipeline::{Pipeline as CorePipeline, PipelineConfig};
use tamaraw_core::tamaraw::{self as tam, OverheadPoint, TamarawParams};
use tamaraw_core::trace::{self, Direction, Packet};
use tamaraw_core::Error;

create_exception!(tamaraw, TamarawError, PyException);
create_exception!(tamaraw, AcceptanceError, TamarawError);

fn to_py(e: Error) -> PyErr {
    if e.is_violation() {
        AcceptanceError::new_err(e.to_string())
    } else if e.is_usage() {
        PyValueError::new_err(e.to_string())
    } else {
        TamarawError::new_err(e.to_string())
    }
}

fn direction(sign: i64) -> PyResult<Direction> {
    Direction::from_sign(sign).ok_or_else(|| PyValueError::new_err(format!("direction must be +1 or -1, got {sign}")))
}

/// A page load: `(time, direction)` packets, direction +1 outgoing, -1 incoming.
#[pyclass(name = "Trace", module = "tamaraw", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTrace {
    inner: trace::Trace,
}

#[pymethods]
impl PyTrace {
    #[new]
    #[pyo3(signature = (packets, site_id = 0, instance_id = 0))]
    fn new(packets: Vec<(f64, i64)>, site_id: u32, instance_id: u32) -> PyResult<Self> {
        let mut out = Vec::with_capacity(packets.len());
        for (i, (t, d)) in packets.into_iter().enumerate() {
            if !t.is_finite() {
                return Err(PyValueError::new_err(format!("packet {i}: non-finite time")));
            }
            if let Some(prev) = out.last().map(|p: &Packet| p.time) {
                if t < prev {
                    return Err(PyValueError::new_err(format!("packet {i}: time {t} before {prev}")));
                }
            }
            out.push(Packet::new(t, direction(d)?));
        }
        Ok(PyTrace {
            inner: trace::Trace::new(out, site_id, instance_id),
        })
    }

    /// Parses the tab-separated `time<TAB>direction` text format.
    #[staticmethod]
    #[pyo3(signature = (text, site_id = 0, instance_id = 0))]
    fn parse(text: &str, site_id: u32, instance_id: u32) -> PyResult<Self> {
        trace::parse_trace(text, site_id, instance_id)
            .map(|inner| PyTrace { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (path, site_id = 0, instance_id = 0))]
    fn from_file(path: PathBuf, site_id: u32, instance_id: u32) -> PyResult<Self> {
        trace::read_trace_file(&path, site_id, instance_id)
            .map(|inner| PyTrace { inner })
            .map_err(to_py)
    }

    #[getter]
    fn site_id(&self) -> u32 {
        self.inner.site_id
    }

    #[getter]
    fn instance_id(&self) -> u32 {
        self.inner.instance_id
    }

    fn packets(&self) -> Vec<(f64, i32)> {
        self.inner
            .packets
            .iter()
            .map(|p| (p.time, p.direction.sign()))
            .collect()
    }

    /// Outgoing and incoming packet counts per time slot.
    #[pyo3(signature = (slot_width = trace::DEFAULT_SLOT_WIDTH, n_slots = trace::DEFAULT_N_SLOTS))]
    fn tam(&self, slot_width: f64, n_slots: usize) -> PyResult<(Vec<u32>, Vec<u32>)> {
        let t = trace::compute_tam(&self.inner, slot_width, n_slots).map_err(to_py)?;
        Ok((t.out_counts, t.in_counts))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Trace(site_id={}, instance_id={}, packets={})",
            self.inner.site_id,
            self.inner.instance_id,
            self.inner.len()
        )
    }
}

/// Tamaraw parameters: seconds between outgoing and incoming cells, and the
/// bucket size each direction's cell count is padded to a multiple of.
#[pyclass(name = "Params", module = "tamaraw", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
pub struct PyParams {
    inner: TamarawParams,
}

#[pymethods]
impl PyParams {
    #[new]
    #[pyo3(signature = (rho_out, rho_in, bucket = 100))]
    fn new(rho_out: f64, rho_in: f64, bucket: u32) -> PyResult<Self> {
        TamarawParams::new(rho_out, rho_in, bucket)
            .map(|inner| PyParams { inner })
            .map_err(to_py)
    }

    #[getter]
    fn rho_out(&self) -> f64 {
        self.inner.rho_out
    }

    #[getter]
    fn rho_in(&self) -> f64 {
        self.inner.rho_in
    }

    #[getter]
    fn bucket(&self) -> u32 {
        self.inner.bucket
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "Params(rho_out={}, rho_in={}, bucket={})",
            self.inner.rho_out, self.inner.rho_in, self.inner.bucket
        )
    }
}

#[pyclass(name = "DefendedTrace", module = "tamaraw", frozen)]
pub struct PyDefended {
    inner: tam::DefendedTrace,
}

#[pymethods]
impl PyDefended {
    #[getter]
    fn n_out(&self) -> u32 {
        self.inner.n_out
    }

    #[getter]
    fn n_in(&self) -> u32 {
        self.inner.n_in
    }

    #[getter]
    fn last_real_time(&self) -> f64 {
        self.inner.last_real_time
    }

    /// `(time, direction, is_dummy)` for every emitted cell.
    fn cells(&self) -> Vec<(f64, i32, bool)> {
        self.inner
            .cells
            .iter()
            .map(|c| (c.time, c.direction.sign(), c.is_dummy))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.total_cells()
    }
}

#[pyfunction]
fn defend(trace: PyRef<'_, PyTrace>, params: PyRef<'_, PyParams>) -> PyResult<PyDefended> {
    tam::defend(&trace.inner, &params.inner)
        .map(|inner| PyDefended { inner })
        .map_err(to_py)
}

/// Defended `(n_out, n_in)` without building the cells.
#[pyfunction]
fn defended_lengths(trace: PyRef<'_, PyTrace>, params: PyRef<'_, PyParams>) -> (u32, u32) {
    tam::defended_lengths(&trace.inner, &params.inner)
}

/// `(bandwidth, time)` overhead of one trace.
#[pyfunction]
fn overhead(trace: PyRef<'_, PyTrace>, params: PyRef<'_, PyParams>) -> (f64, f64) {
    let o = tam::fast_overhead(&trace.inner, &params.inner);
    (o.bandwidth, o.time)
}

#[pyfunction]
#[pyo3(signature = (init, factor = 7.0, steps = 14))]
fn param_grid(init: PyRef<'_, PyParams>, factor: f64, steps: usize) -> PyResult<Vec<PyParams>> {
    tam::build_param_grid(&init.inner, factor, steps)
        .map(|g| g.into_iter().map(|inner| PyParams { inner }).collect())
        .map_err(to_py)
}

/// Mean overheads of every parameter pair over the traces, reduced to the
/// Pareto front: `[(params, bandwidth, time)]` ordered by time.
#[pyfunction]
fn pareto_front(traces: Vec<PyRef<'_, PyTrace>>, params: Vec<PyRef<'_, PyParams>>) -> Vec<(PyParams, f64, f64)> {
    let owned: Vec<trace::Trace> = traces.iter().map(|t| t.inner.clone()).collect();
    let points: Vec<OverheadPoint> = params.iter().map(|p| tam::mean_overhead(&owned, &p.inner)).collect();
    tam::pareto_filter(&points)
        .into_iter()
        .map(|p| (PyParams { inner: p.params }, p.bandwidth, p.time))
        .collect()
}

/// Clusters the traces of one site; returns member indices per pattern.
#[pyfunction]
#[pyo3(signature = (traces, k_neighbors = 7, max_clusters = 6))]
fn mine_patterns(
    traces: Vec<PyRef<'_, PyTrace>>,
    k_neighbors: usize,
    max_clusters: usize,
) -> PyResult<Vec<Vec<usize>>> {
    let owned: Vec<trace::Trace> = traces.iter().map(|t| t.inner.clone()).collect();
    let config = CastConfig {
        k_neighbors,
        max_clusters,
        ..CastConfig::default()
    };
    core_mine(&owned, &config).map(|p| p.clusters).map_err(to_py)
}

/// Best-guess accuracy over `(site, observation key)` pairs.
#[pyfunction]
fn attacker_accuracy(labeled: Vec<(u32, u64)>) -> f64 {
    core_attacker_accuracy(&labeled)
}

#[pyfunction]
fn weighted_delta(bucket_sites: Vec<u32>) -> PyResult<f64> {
    bound::weighted_delta(&bucket_sites).map_err(to_py)
}

/// Global bound over sets of `(site, observation key)` pairs. Weights default
/// to each set's share of the observations.
#[pyfunction]
#[pyo3(signature = (sets, weights = None))]
fn global_bound(sets: Vec<Vec<(u32, u64)>>, weights: Option<Vec<f64>>) -> PyResult<f64> {
    let weights = weights.unwrap_or_else(|| {
        let sizes: Vec<usize> = sets.iter().map(Vec::len).collect();
        bound::set_weights(&sizes, bound::Weighting::Proportional)
    });
    bound::global_bound(&sets, &weights).map(|g| g.value).map_err(to_py)
}

/// The batch pipeline over a workspace directory.
#[pyclass(name = "Pipeline", module = "tamaraw")]
pub struct PyPipeline {
    inner: CorePipeline,
}

#[pymethods]
impl PyPipeline {
    /// `config` is a JSON document in the same schema as the CLI's `--config`.
    #[new]
    #[pyo3(signature = (workspace, config = None, seed = None))]
    fn new(workspace: PathBuf, config: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg: PipelineConfig = match config {
            Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        CorePipeline::new(cfg, workspace)
            .map(|inner| PyPipeline { inner })
            .map_err(to_py)
    }

    /// Runs one stage by its CLI name and returns its summary line.
    fn run(&self, py: Python<'_>, stage: &str) -> PyResult<String> {
        let p = &self.inner;
        py.detach(|| match stage {
            "synth" => p.synth(),
            "tam" => p.tam(),
            "defend" => p.defend_all(&p.config.global),
            "pareto" => p.pareto(),
            "patterns" => p.patterns(),
            "sets" => p.sets(),
            "safetimes" => p.safetimes(),
            "simulate" => p.simulate(),
            "bounds" => p.bounds(),
            "attack" => p.attack(),
            "report" => p.report().map(|r| r.message),
            other => Err(Error::InvalidArgument(format!("unknown stage `{other}`"))),
        })
        .map_err(to_py)
    }

    fn run_all(&self, py: Python<'_>) -> PyResult<Vec<String>> {
        py.detach(|| self.inner.run_all()).map_err(to_py)
    }
}

#[pymodule]
fn tamaraw(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("TamarawError", m.py().get_type::<TamarawError>())?;
    m.add("AcceptanceError", m.py().get_type::<AcceptanceError>())?;
    m.add_class::<PyTrace>()?;
    m.add_class::<PyParams>()?;
    m.add_class::<PyDefended>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(defend, m)?)?;
    m.add_function(wrap_pyfunction!(defended_lengths, m)?)?;
    m.add_function(wrap_pyfunction!(overhead, m)?)?;
    m.add_function(wrap_pyfunction!(param_grid, m)?)?;
    m.add_function(wrap_pyfunction!(pareto_front, m)?)?;
    m.add_function(wrap_pyfunction!(mine_patterns, m)?)?;
    m.add_function(wrap_pyfunction!(attacker_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_delta, m)?)?;
    m.add_function(wrap_pyfunction!(global_bound, m)?)?;
    Ok(())
}
