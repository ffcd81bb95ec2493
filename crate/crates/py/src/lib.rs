//! Python bindings for the `fedhet_core` simulator and closed-form analysis.

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fedhet_core::analysis::{self, CodesignFree};
use fedhet_core::config::{self, ConfigError};
use fedhet_core::engine::run_experiment;
use fedhet_core::problems;
use fedhet_core::sampling;
use fedhet_core::solvers;
use fedhet_core::{Algorithm, FedError, SolverSpec};

fn fed_err(e: FedError) -> PyErr {
    match e {
        FedError::NumericalBlowup(_) => PyArithmeticError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn cfg_err(e: ConfigError) -> PyErr {
    match e {
        ConfigError::Model(f) => fed_err(f),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn solver(kind: &str, param: f64) -> PyResult<SolverSpec> {
    Ok(match kind {
        "sgd" => SolverSpec::PlainSgd,
        "momentum" => SolverSpec::MomentumSgd { rho: param },
        "proximal" => SolverSpec::ProximalSgd { mu: param },
        "decayed" => SolverSpec::DecayedSgd { decay: param },
        other => return Err(PyValueError::new_err(format!("unknown solver `{other}`"))),
    })
}

/// Per-step gradient coefficients of a local solver.
#[pyfunction]
#[pyo3(signature = (kind, steps, eta, param = 0.0))]
fn accumulation_vector(kind: &str, steps: u32, eta: f64, param: f64) -> PyResult<Vec<f64>> {
    let v = solvers::accumulation_vector(solver(kind, param)?, steps, eta).map_err(fed_err)?;
    Ok(v.coeffs().to_vec())
}

/// Coefficients recovered by running the solver on basis-vector gradients.
#[pyfunction]
#[pyo3(signature = (kind, steps, eta, param = 0.0))]
fn extract_coefficients(kind: &str, steps: u32, eta: f64, param: f64) -> PyResult<Vec<f64>> {
    let v = solvers::extract_coefficients(solver(kind, param)?, steps, eta).map_err(fed_err)?;
    Ok(v.coeffs().to_vec())
}

#[pyfunction]
fn probs_fedacs(weights: Vec<f64>, failure: Vec<f64>, l1norms: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(sampling::probs_fedacs(&weights, &failure, &l1norms)
        .map_err(fed_err)?
        .to_vec())
}

#[pyfunction]
#[pyo3(signature = (weights, grad_norms, floor = sampling::NORM_FLOOR))]
fn probs_optimal_sampling(
    weights: Vec<f64>,
    grad_norms: Vec<f64>,
    floor: f64,
) -> PyResult<Vec<f64>> {
    Ok(
        sampling::probs_optimal_sampling(&weights, &grad_norms, floor)
            .map_err(fed_err)?
            .to_vec(),
    )
}

/// `gamma`, `omega_eff`, `eta_eff`, `t_eff` and `chi_square` as a dict.
#[pyfunction]
fn surrogate_stats<'py>(
    py: Python<'py>,
    p: Vec<f64>,
    failure: Vec<f64>,
    l1norms: Vec<f64>,
    weights: Vec<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let s = analysis::surrogate_stats(&p, &failure, &l1norms, &weights).map_err(fed_err)?;
    let d = PyDict::new(py);
    d.set_item("gamma", s.gamma)?;
    d.set_item("omega_eff", s.omega_eff)?;
    d.set_item("eta_eff", s.eta_eff)?;
    d.set_item("t_eff", s.t_eff)?;
    d.set_item("chi_square", s.chi_square)?;
    Ok(d)
}

/// Failure probabilities making every client's `(1 - q) |a|_1` equal to client 0's.
#[pyfunction]
fn codesign<'py>(
    py: Python<'py>,
    weights: Vec<f64>,
    anchor_failure: f64,
    anchor_l1: f64,
    l1norms: Vec<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let s = analysis::codesign_solve(
        &weights,
        anchor_failure,
        anchor_l1,
        CodesignFree::L1(l1norms),
    )
    .map_err(fed_err)?;
    let d = PyDict::new(py);
    d.set_item("failure", s.failure)?;
    d.set_item("l1norms", s.l1norms)?;
    d.set_item("eta_eff", s.eta_eff)?;
    d.set_item("t_eff", s.t_eff)?;
    Ok(d)
}

/// Step length per algorithm matching FedAvg's effective step product.
#[pyfunction]
fn calibrate<'py>(
    py: Python<'py>,
    eta: f64,
    weights: Vec<f64>,
    failure: Vec<f64>,
    l1norms: Vec<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let map =
        analysis::calibrate_step_lengths(eta, &weights, &failure, &l1norms).map_err(fed_err)?;
    let d = PyDict::new(py);
    for (a, v) in map {
        d.set_item(a.name(), v)?;
    }
    Ok(d)
}

#[pyfunction]
fn effective_step_product(
    algorithm: &str,
    eta: f64,
    weights: Vec<f64>,
    failure: Vec<f64>,
    l1norms: Vec<f64>,
) -> PyResult<f64> {
    let a: Algorithm = algorithm.parse().map_err(fed_err)?;
    analysis::effective_step_product(a, eta, &weights, &failure, &l1norms).map_err(fed_err)
}

#[pyfunction]
fn achievability<'py>(
    py: Python<'py>,
    steps: [u32; 2],
    failure: [f64; 2],
    e: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let a = problems::achievability_instance(steps, failure, e).map_err(fed_err)?;
    let d = PyDict::new(py);
    d.set_item("omega", a.omega.to_vec())?;
    d.set_item("surrogate_optimum", a.surrogate_optimum)?;
    d.set_item("chi_square", a.chi_square)?;
    d.set_item("kappa_sq", a.kappa_sq)?;
    d.set_item("limit_grad_sq", a.limit_grad_sq)?;
    Ok(d)
}

#[pyfunction]
fn theorem2_limit(chi_square: f64, kappa_sq: f64, sigma_sq: f64) -> (f64, f64) {
    analysis::theorem2_limit(chi_square, kappa_sq, sigma_sq)
}

#[pyfunction]
fn preset_names() -> Vec<&'static str> {
    config::preset_names().collect()
}

/// Runs a preset or TOML text (overlaid on the preset when both are given).
///
/// Returns one dict per (replicate, algorithm) with the final model and the
/// per-round `dist_true` trace.
#[pyfunction]
#[pyo3(signature = (preset = None, config_text = None, seed = None, replicates = None, rounds = None, jobs = None))]
fn simulate<'py>(
    py: Python<'py>,
    preset: Option<&str>,
    config_text: Option<&str>,
    seed: Option<u64>,
    replicates: Option<usize>,
    rounds: Option<u64>,
    jobs: Option<usize>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut table = match preset {
        Some(name) => {
            config::parse_table(config::preset_source(name).map_err(cfg_err)?).map_err(cfg_err)?
        }
        None => toml::Table::new(),
    };
    if let Some(text) = config_text {
        config::merge_tables(&mut table, config::parse_table(text).map_err(cfg_err)?);
    }
    let mut cfg = config::build_config(table).map_err(cfg_err)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = replicates {
        cfg.replicates = r;
    }
    if let Some(r) = rounds {
        cfg.rounds = r;
    }
    if let Some(j) = jobs {
        cfg.jobs = j;
    }
    let traces = py.detach(|| run_experiment(&cfg)).map_err(fed_err)?;
    traces
        .into_iter()
        .map(|t| {
            let d = PyDict::new(py);
            d.set_item("algorithm", &t.algorithm)?;
            d.set_item("replicate", t.replicate)?;
            let dist: Vec<f64> = t
                .records
                .iter()
                .map(|r| r.metric("dist_true").unwrap_or(f64::NAN))
                .collect();
            d.set_item("dist_true", dist)?;
            d.set_item("final_model", t.final_model.into_vec())?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn fedhet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(accumulation_vector, m)?)?;
    m.add_function(wrap_pyfunction!(extract_coefficients, m)?)?;
    m.add_function(wrap_pyfunction!(probs_fedacs, m)?)?;
    m.add_function(wrap_pyfunction!(probs_optimal_sampling, m)?)?;
    m.add_function(wrap_pyfunction!(surrogate_stats, m)?)?;
    m.add_function(wrap_pyfunction!(codesign, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(effective_step_product, m)?)?;
    m.add_function(wrap_pyfunction!(achievability, m)?)?;
    m.add_function(wrap_pyfunction!(theorem2_limit, m)?)?;
    m.add_function(wrap_pyfunction!(preset_names, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
