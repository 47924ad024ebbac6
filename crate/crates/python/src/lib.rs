use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use vild::checks::{run_checks, CheckOptions, Suite};
use vild::demogen::NoiseKind;
use vild::harness::{generate_corpus, run_experiment, DemosSection, EnvKind, EnvSection, ExperimentConfig};
use vild::VildError;

type ReportRow = (String, String, String, f64, f64);

fn to_py(e: VildError) -> PyErr {
    match e {
        VildError::Config(_) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Demonstration corpus as JSONL text (header line first).
#[pyfunction]
#[pyo3(signature = (env="chain", k=10, n=100, seed=0, noise="gaussian", sigma=None, horizon=10, states=5, dim=1))]
#[allow(clippy::too_many_arguments)]
fn generate_demos(
    env: &str,
    k: usize,
    n: usize,
    seed: u64,
    noise: &str,
    sigma: Option<Vec<f64>>,
    horizon: usize,
    states: usize,
    dim: usize,
) -> PyResult<String> {
    let env = EnvSection {
        task: env.parse::<EnvKind>().map_err(to_py)?,
        horizon,
        states,
        dim,
        ..EnvSection::default()
    };
    let demos = DemosSection {
        noise: noise.parse::<NoiseKind>().map_err(to_py)?,
        k,
        n,
        seed,
        sigma,
        path: None,
    };
    let corpus = generate_corpus(&env, &demos).map_err(to_py)?;
    corpus.dataset.to_jsonl().map_err(to_py)
}

/// Runs an experiment described by a TOML string, writes the run
/// directory to `out` and returns the final mean return of each trial.
#[pyfunction]
fn train(py: Python<'_>, config: &str, out: PathBuf) -> PyResult<Vec<f64>> {
    let cfg = ExperimentConfig::from_toml(config).map_err(to_py)?;
    let outcome = py.detach(|| run_experiment(&cfg, &out)).map_err(to_py)?;
    Ok(outcome
        .trials
        .iter()
        .map(|t| t.metrics.last().map_or(f64::NAN, |r| r.mean_return))
        .collect())
}

/// Oracle check rows as `(suite, check, status, max_error, tolerance)`.
#[pyfunction]
#[pyo3(signature = (check="all", instances=20, seed=0))]
fn oracle(py: Python<'_>, check: &str, instances: usize, seed: u64) -> PyResult<Vec<ReportRow>> {
    let suites = Suite::parse_selection(check).map_err(to_py)?;
    let opts = CheckOptions {
        instances,
        seed,
        ..CheckOptions::default()
    };
    let rows = py.detach(|| run_checks(&suites, &opts)).map_err(to_py)?;
    Ok(rows
        .into_iter()
        .map(|r| (r.suite.to_string(), r.check, r.status.to_string(), r.max_error, r.tolerance))
        .collect())
}

#[pymodule]
fn vild_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(generate_demos, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    Ok(())
}
