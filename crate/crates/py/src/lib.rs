//! Python module `lander_py`: scenario validation, seeded batches and the
//! gradient check. Reports cross the boundary as JSON text.

use std::path::PathBuf;

use nalgebra::Vector2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use lander::cbf::{self, ObstacleSpec};
use lander::harness::{self, HarnessError, ScenarioConfig};
use lander::sim;

fn to_py(e: HarnessError) -> PyErr {
    match e {
        HarnessError::Io(_) | HarnessError::Json(_) | HarnessError::Invalid(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn load(path: PathBuf) -> PyResult<ScenarioConfig> {
    ScenarioConfig::load(&path).map_err(to_py)
}

/// Loads and validates a scenario file; returns its name.
#[pyfunction]
fn validate_scenario(path: PathBuf) -> PyResult<String> {
    Ok(load(path)?.name)
}

/// Runs a seeded batch and returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (path, trials=None, seed=None))]
fn run_batch(py: Python<'_>, path: PathBuf, trials: Option<usize>, seed: Option<u64>) -> PyResult<String> {
    let sc = load(path)?;
    let batch = py.detach(|| harness::run_batch(&sc, trials.unwrap_or(sc.trials), seed.unwrap_or(sc.seed)));
    Ok(harness::format_report(&batch.report, None, harness::ReportFormat::Json))
}

/// Runs one closed-loop trial and returns its terminal summary as JSON.
#[pyfunction]
fn run_trial(py: Python<'_>, path: PathBuf, seed: u64) -> PyResult<String> {
    let sc = load(path)?;
    let trial = py.detach(|| sim::run_closed_loop(&sc, seed));
    serde_json::to_string(&trial.log.summary()).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Maximum relative gradient error at each of `points` random points.
#[pyfunction]
#[pyo3(signature = (path, points=20, seed=None))]
fn check_gradients(path: PathBuf, points: usize, seed: Option<u64>) -> PyResult<Vec<f64>> {
    let sc = load(path)?;
    let reports = harness::check_gradients(&sc, points, seed.unwrap_or(sc.seed)).map_err(to_py)?;
    Ok(reports.iter().map(|r| r.max_rel_error).collect())
}

/// Barrier value of a horizontal position for one circular obstacle (m²).
#[pyfunction]
fn barrier_value(pos: (f64, f64), center: (f64, f64), radius: f64, safety_margin: f64) -> f64 {
    let obs = ObstacleSpec::new([center.0, center.1], radius, safety_margin);
    cbf::barrier_value(Vector2::new(pos.0, pos.1), &obs)
}

#[pymodule]
fn lander_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(validate_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(run_batch, m)?)?;
    m.add_function(wrap_pyfunction!(run_trial, m)?)?;
    m.add_function(wrap_pyfunction!(check_gradients, m)?)?;
    m.add_function(wrap_pyfunction!(barrier_value, m)?)?;
    Ok(())
}
