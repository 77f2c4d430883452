//! Python bindings for the hybrid force/velocity/attitude controller and its simulator.

use std::path::PathBuf;

use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use phri_core::analysis::metrics_report;
use phri_core::cli::{validate_config, write_run};
use phri_core::robot::{dynamics_terms, forward_kinematics, jacobian, JointState, KinematicChain, MatNN, VecN};
use phri_core::simulator::{csv_header, run_scenario, ScenarioConfig, SimError, SimLog};
use phri_core::spatial::{self, Mat3, UnitQuaternion, Vec3};

type Quat = (f64, f64, f64, f64);
type Rows = Vec<Vec<f64>>;

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn matrix_rows(m: &MatNN) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn mat3_rows(m: &Mat3) -> [[f64; 3]; 3] {
    [0, 1, 2].map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)]])
}

fn quat_in(q: Quat) -> PyResult<UnitQuaternion> {
    UnitQuaternion::new(q.0, q.1, q.2, q.3).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn quat_out(q: &UnitQuaternion) -> Quat {
    (q.w, q.v.x, q.v.y, q.v.z)
}

fn joint_vector(chain: &KinematicChain, values: Vec<f64>, what: &str) -> PyResult<VecN> {
    if values.len() != chain.dof() {
        return Err(PyValueError::new_err(format!("{what} has {} entries, the chain has {} joints", values.len(), chain.dof())));
    }
    Ok(VecN::from_vec(values))
}

fn chain_of(scenario: Option<&Scenario>) -> KinematicChain {
    scenario.map_or_else(KinematicChain::default_arm, |s| s.inner.chain.clone())
}

/// A scenario configuration.
#[pyclass(name = "Scenario", module = "phri", skip_from_py_object)]
#[derive(Clone)]
pub struct Scenario {
    inner: ScenarioConfig,
}

#[pymethods]
impl Scenario {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = ScenarioConfig::from_json(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| PyValueError::new_err(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// Raises `ValueError` when the scenario cannot be simulated.
    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }

    #[setter]
    fn set_dt(&mut self, dt: f64) {
        self.inner.dt = dt;
    }

    #[getter]
    fn duration(&self) -> f64 {
        self.inner.duration
    }

    #[setter]
    fn set_duration(&mut self, duration: f64) {
        self.inner.duration = duration;
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn __repr__(&self) -> String {
        format!("Scenario(name={:?}, seed={}, dt={}, duration={})", self.inner.name, self.inner.seed, self.inner.dt, self.inner.duration)
    }
}

/// The per-step log of one run.
#[pyclass(name = "SimulationLog", module = "phri")]
pub struct SimulationLog {
    inner: SimLog,
    abort_reason: Option<String>,
}

#[pymethods]
impl SimulationLog {
    fn __len__(&self) -> usize {
        self.inner.records.len()
    }

    #[getter]
    fn columns(&self) -> Vec<String> {
        csv_header(self.inner.dof())
    }

    #[getter]
    fn aborted(&self) -> bool {
        self.abort_reason.is_some()
    }

    #[getter]
    fn abort_reason(&self) -> Option<String> {
        self.abort_reason.clone()
    }

    /// All samples of one CSV column, in step order.
    fn column(&self, name: &str) -> PyResult<Vec<f64>> {
        let idx = self.columns().iter().position(|c| c == name).ok_or_else(|| PyKeyError::new_err(name.to_string()))?;
        Ok(self.inner.records.iter().map(|r| r.to_row()[idx].parse().unwrap_or(f64::NAN)).collect())
    }

    fn meta<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.inner.meta)
    }

    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &metrics_report(&self.inner))
    }

    /// Writes `log.csv`, `meta.json` and `metrics.json` into `out_dir`.
    fn write(&self, out_dir: PathBuf) -> PyResult<()> {
        write_run(&self.inner, &out_dir).map(|_| ()).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

/// Runs a scenario to completion. An aborted run returns its partial log.
#[pyfunction]
fn run(py: Python<'_>, scenario: &Scenario) -> PyResult<SimulationLog> {
    let cfg = scenario.inner.clone();
    match py.detach(move || run_scenario(&cfg)) {
        Ok(inner) => Ok(SimulationLog { inner, abort_reason: None }),
        Err(SimError::Aborted { source, log }) => Ok(SimulationLog { inner: *log, abort_reason: Some(source.to_string()) }),
        Err(e) => Err(PyValueError::new_err(e.to_string())),
    }
}

/// Runs the model oracles for the scenario's chain and returns the report.
#[pyfunction]
#[pyo3(signature = (scenario, samples = 1000))]
fn validate<'py>(py: Python<'py>, scenario: &Scenario, samples: usize) -> PyResult<Bound<'py, PyDict>> {
    let cfg = scenario.inner.clone();
    let report = py.detach(move || validate_config(&cfg, samples));
    let out = json_to_py(py, &report)?.cast_into::<PyDict>()?;
    out.set_item("passed", report.passed())?;
    Ok(out)
}

/// End-effector rotation and position for joint angles `q`.
#[pyfunction]
#[pyo3(signature = (q, scenario = None))]
fn end_effector_pose(q: Vec<f64>, scenario: Option<&Scenario>) -> PyResult<([[f64; 3]; 3], [f64; 3])> {
    let chain = chain_of(scenario);
    let (r, p) = forward_kinematics(&chain, &joint_vector(&chain, q, "q")?);
    Ok((mat3_rows(&r), [p.x, p.y, p.z]))
}

/// Base-frame geometric Jacobian, rows `[v; ω]`.
#[pyfunction(name = "jacobian")]
#[pyo3(signature = (q, scenario = None))]
fn py_jacobian(q: Vec<f64>, scenario: Option<&Scenario>) -> PyResult<Rows> {
    let chain = chain_of(scenario);
    Ok(matrix_rows(&jacobian(&chain, &joint_vector(&chain, q, "q")?)))
}

/// Inertia matrix, Coriolis matrix and gravity torque at `(q, qdot)`.
#[pyfunction]
#[pyo3(signature = (q, qdot, scenario = None))]
fn dynamics(q: Vec<f64>, qdot: Vec<f64>, scenario: Option<&Scenario>) -> PyResult<(Rows, Rows, Vec<f64>)> {
    let chain = chain_of(scenario);
    let state = JointState { q: joint_vector(&chain, q, "q")?, qdot: joint_vector(&chain, qdot, "qdot")? };
    let terms = dynamics_terms(&chain, &state);
    Ok((matrix_rows(&terms.m), matrix_rows(&terms.c), terms.g.iter().copied().collect()))
}

/// Unit quaternion `(w, x, y, z)` for a rotation of `angle` about `axis`.
#[pyfunction]
fn quat_from_axis_angle(axis: [f64; 3], angle: f64) -> PyResult<Quat> {
    spatial::quat_from_axis_angle(&Vec3::from(axis), angle)
        .map(|q| quat_out(&q))
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Error quaternion `qd⁻¹ ∘ q`.
#[pyfunction]
fn quat_error(qd: Quat, q: Quat) -> PyResult<Quat> {
    Ok(quat_out(&spatial::quat_error(&quat_in(qd)?, &quat_in(q)?)))
}

#[pyfunction]
fn quat_to_rotation(q: Quat) -> PyResult<[[f64; 3]; 3]> {
    spatial::quat_to_rotation(&quat_in(q)?)
        .map(|r| mat3_rows(&r))
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn phri(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Scenario>()?;
    m.add_class::<SimulationLog>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(end_effector_pose, m)?)?;
    m.add_function(wrap_pyfunction!(py_jacobian, m)?)?;
    m.add_function(wrap_pyfunction!(dynamics, m)?)?;
    m.add_function(wrap_pyfunction!(quat_from_axis_angle, m)?)?;
    m.add_function(wrap_pyfunction!(quat_error, m)?)?;
    m.add_function(wrap_pyfunction!(quat_to_rotation, m)?)?;
    Ok(())
}
