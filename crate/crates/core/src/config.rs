//! TOML experiment files, bundled presets, and CSV output.

use std::io::{self, Write};

use serde::Deserialize;
use thiserror::Error;
use toml::{Table, Value};

use crate::channel::{schedule_static, schedule_uniform_random};
use crate::engine::{AlgorithmSpec, RunTrace};
use crate::error::FedError;
use crate::model::{Algorithm, ClientProfile, ModelVector, Population, SolverSpec};
use crate::problems::QuadraticProblem;
use crate::solvers::DEFAULT_BLOWUP_GUARD;

/// Header of the per-round CSV.
pub const CSV_HEADER: &str =
    "replicate,round,algorithm,dist_true,dist_surrogate,grad_norm_sq,chi_square,eta_eff,t_eff";

/// Metrics written after the `algorithm` column, in order.
pub const CSV_METRICS: [&str; 6] = [
    "dist_true",
    "dist_surrogate",
    "grad_norm_sq",
    "chi_square",
    "eta_eff",
    "t_eff",
];

const PRESETS: [(&str, &str); 6] = [
    (
        "example2-static",
        include_str!("../presets/example2-static.toml"),
    ),
    ("fig2-left", include_str!("../presets/fig2-left.toml")),
    ("fig2-middle", include_str!("../presets/fig2-middle.toml")),
    ("fig2-right", include_str!("../presets/fig2-right.toml")),
    (
        "fig4-codesign",
        include_str!("../presets/fig4-codesign.toml"),
    ),
    (
        "achievability",
        include_str!("../presets/achievability.toml"),
    ),
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid value for `{key}`: {message}")]
    Validation { key: String, message: String },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Model(#[from] FedError),
}

fn invalid(key: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Validation {
        key: key.into(),
        message: message.into(),
    }
}

/// Fully resolved experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub rounds: u64,
    pub clients_per_round: usize,
    pub eta: f64,
    pub seed: u64,
    pub replicates: usize,
    pub jobs: usize,
    /// Match each algorithm's effective step product to FedAvg's.
    pub calibrate: bool,
    pub initial_model: ModelVector,
    pub problem: QuadraticProblem,
    pub population: Population,
    pub algorithms: Vec<AlgorithmSpec>,
    pub blowup_guard: f64,
}

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

/// Raw TOML text of a bundled preset.
pub fn preset_source(name: &str) -> Result<&'static str, ConfigError> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| *s)
        .ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))
}

pub fn preset(name: &str) -> Result<ExperimentConfig, ConfigError> {
    parse_config(preset_source(name)?)
}

pub fn parse_table(text: &str) -> Result<Table, ConfigError> {
    text.parse::<Table>().map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start].matches('\n').count() + 1)
            .unwrap_or(0);
        ConfigError::Parse {
            line,
            message: e.message().to_string(),
        }
    })
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    build_config(parse_table(text)?)
}

pub fn load_config(path: &std::path::Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

/// Recursively overlays `top` onto `base`; arrays and scalars in `top` replace.
pub fn merge_tables(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge_tables(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

const TOP_KEYS: &[&str] = &["experiment", "problem", "population", "algorithm"];
const EXPERIMENT_KEYS: &[&str] = &[
    "name",
    "rounds",
    "clients_per_round",
    "eta",
    "seed",
    "replicates",
    "jobs",
    "calibrate",
    "sigma_sq",
    "initial_model",
    "blowup_guard",
];
const PROBLEM_KEYS: &[&str] = &["targets", "random"];
const RANDOM_KEYS: &[&str] = &["clients", "dim", "seed"];
const POPULATION_KEYS: &[&str] = &["clients", "weights", "solver", "seed", "group"];
const GROUP_KEYS: &[&str] = &["first", "count", "steps", "failure", "per_round", "solver"];
const ALGORITHM_KEYS: &[&str] = &["kind", "name", "solver", "codesign"];

fn solver_keys(kind: Option<&str>) -> &'static [&'static str] {
    match kind {
        Some("momentum") => &["kind", "rho"],
        Some("proximal") => &["kind", "mu"],
        Some("decayed") => &["kind", "decay"],
        _ => &["kind"],
    }
}

fn check_keys(table: &Table, allowed: &[&str], prefix: &str) -> Result<(), ConfigError> {
    for (k, v) in table {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        if !allowed.contains(&k.as_str()) {
            return Err(invalid(path, "unknown key"));
        }
        if k == "solver" {
            if let Value::Table(t) = v {
                check_keys(t, solver_keys(t.get("kind").and_then(Value::as_str)), &path)?;
            }
        }
    }
    Ok(())
}

fn check_array(
    table: &Table,
    key: &str,
    allowed: &[&str],
    prefix: &str,
) -> Result<(), ConfigError> {
    match table.get(key) {
        Some(Value::Array(items)) => {
            for (i, item) in items.iter().enumerate() {
                if let Value::Table(t) = item {
                    check_keys(t, allowed, &format!("{prefix}.{key}[{i}]"))?;
                }
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

fn check_all_keys(root: &Table) -> Result<(), ConfigError> {
    check_keys(root, TOP_KEYS, "")?;
    if let Some(Value::Table(t)) = root.get("experiment") {
        check_keys(t, EXPERIMENT_KEYS, "experiment")?;
    }
    if let Some(Value::Table(t)) = root.get("problem") {
        check_keys(t, PROBLEM_KEYS, "problem")?;
        if let Some(Value::Table(r)) = t.get("random") {
            check_keys(r, RANDOM_KEYS, "problem.random")?;
        }
    }
    if let Some(Value::Table(t)) = root.get("population") {
        check_keys(t, POPULATION_KEYS, "population")?;
        check_array(t, "group", GROUP_KEYS, "population")?;
    }
    if let Some(Value::Array(items)) = root.get("algorithm") {
        for (i, item) in items.iter().enumerate() {
            if let Value::Table(t) = item {
                check_keys(t, ALGORITHM_KEYS, &format!("algorithm[{i}]"))?;
            }
        }
    }
    Ok(())
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    experiment: RawExperiment,
    problem: Option<RawProblem>,
    #[serde(default)]
    population: RawPopulation,
    #[serde(default)]
    algorithm: Vec<RawAlgorithm>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    name: Option<String>,
    rounds: Option<u64>,
    clients_per_round: Option<usize>,
    eta: Option<f64>,
    seed: Option<u64>,
    replicates: Option<usize>,
    jobs: Option<usize>,
    #[serde(default)]
    calibrate: bool,
    sigma_sq: Option<f64>,
    initial_model: Option<Vec<f64>>,
    blowup_guard: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    targets: Option<Vec<Vec<f64>>>,
    random: Option<RawRandom>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRandom {
    clients: usize,
    dim: usize,
    #[serde(default)]
    seed: u64,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawPopulation {
    clients: Option<usize>,
    weights: Option<Vec<f64>>,
    #[serde(default)]
    solver: SolverSpec,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    group: Vec<RawGroup>,
}

#[derive(Deserialize, Clone, Copy)]
#[serde(untagged)]
enum OneOrRange<T> {
    One(T),
    Range([T; 2]),
}

impl<T: Copy> OneOrRange<T> {
    fn bounds(self) -> [T; 2] {
        match self {
            OneOrRange::One(v) => [v, v],
            OneOrRange::Range(r) => r,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGroup {
    first: usize,
    count: Option<usize>,
    steps: OneOrRange<u32>,
    failure: OneOrRange<f64>,
    #[serde(default)]
    per_round: bool,
    solver: Option<SolverSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAlgorithm {
    kind: Algorithm,
    name: Option<String>,
    solver: Option<SolverSpec>,
    #[serde(default)]
    codesign: bool,
}

fn typed<T: for<'de> Deserialize<'de>>(root: &Table, key: &str) -> Result<Option<T>, ConfigError> {
    match root.get(key) {
        None => Ok(None),
        Some(v) => v
            .clone()
            .try_into::<T>()
            .map(Some)
            .map_err(|e| invalid(key, e.message().to_string())),
    }
}

fn positive(key: &str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(key, format!("{v} must be positive and finite")))
    }
}

/// Validates a parsed table and fills defaults.
pub fn build_config(root: Table) -> Result<ExperimentConfig, ConfigError> {
    check_all_keys(&root)?;
    let raw = RawConfig {
        experiment: typed(&root, "experiment")?.unwrap_or_default(),
        problem: typed(&root, "problem")?,
        population: typed(&root, "population")?.unwrap_or_default(),
        algorithm: typed(&root, "algorithm")?.unwrap_or_default(),
    };
    let exp = raw.experiment;
    let sigma_sq = exp.sigma_sq.unwrap_or(0.0);
    if !(sigma_sq >= 0.0 && sigma_sq.is_finite()) {
        return Err(invalid(
            "experiment.sigma_sq",
            format!("{sigma_sq} must be non-negative"),
        ));
    }

    let problem = match raw.problem {
        None => {
            return Err(invalid(
                "problem",
                "missing section; give `targets` or `random`",
            ))
        }
        Some(RawProblem {
            targets: Some(_),
            random: Some(_),
        }) => {
            return Err(invalid(
                "problem",
                "give either `targets` or `random`, not both",
            ))
        }
        Some(RawProblem {
            targets: Some(t),
            random: None,
        }) => {
            let targets = t
                .into_iter()
                .map(ModelVector::new)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| invalid("problem.targets", e.to_string()))?;
            QuadraticProblem::new(targets, sigma_sq)
                .map_err(|e| invalid("problem.targets", e.to_string()))?
        }
        Some(RawProblem {
            targets: None,
            random: Some(r),
        }) => QuadraticProblem::gaussian(r.clients, r.dim, r.seed, sigma_sq)
            .map_err(|e| invalid("problem.random", e.to_string()))?,
        Some(RawProblem {
            targets: None,
            random: None,
        }) => return Err(invalid("problem", "give `targets` or `random`")),
    };

    let pop = raw.population;
    let m = problem.clients();
    if let Some(c) = pop.clients {
        if c != m {
            return Err(invalid(
                "population.clients",
                format!("{c} clients but the problem has {m} targets"),
            ));
        }
    }
    let weights = match pop.weights {
        Some(w) if w.len() != m => {
            return Err(invalid(
                "population.weights",
                format!("expected {m} weights, got {}", w.len()),
            ))
        }
        Some(w) => w,
        None => vec![1.0 / m as f64; m],
    };
    pop.solver
        .validate()
        .map_err(|e| invalid("population.solver", e.to_string()))?;
    let mut profiles: Vec<ClientProfile> = (0..m)
        .map(|id| ClientProfile {
            id,
            weight: weights[id],
            schedule: schedule_static(1, 0.0),
            solver: pop.solver,
        })
        .collect();
    for (i, g) in pop.group.iter().enumerate() {
        let key = format!("population.group[{i}]");
        let count = g.count.unwrap_or(m.saturating_sub(g.first));
        if count == 0 || g.first + count > m {
            return Err(invalid(
                key,
                format!(
                    "clients {}..{} out of range for {m} clients",
                    g.first,
                    g.first + count
                ),
            ));
        }
        let steps = g.steps.bounds();
        let failure = g.failure.bounds();
        let schedule = if !g.per_round && steps[0] == steps[1] && failure[0] == failure[1] {
            schedule_static(steps[0], failure[0])
        } else {
            schedule_uniform_random(steps, failure, g.per_round, pop.seed)
        };
        schedule.validate().map_err(|e| invalid(key.clone(), e))?;
        for p in &mut profiles[g.first..g.first + count] {
            p.schedule = schedule.clone();
            if let Some(s) = g.solver {
                p.solver = s;
            }
        }
    }
    let population = Population::new(profiles).map_err(|e| invalid("population", e.to_string()))?;

    let mut algorithms = Vec::new();
    for (i, a) in raw.algorithm.into_iter().enumerate() {
        if let Some(s) = a.solver {
            s.validate()
                .map_err(|e| invalid(format!("algorithm[{i}].solver"), e.to_string()))?;
        }
        let label = a.name.unwrap_or_else(|| a.kind.name().to_string());
        if algorithms.iter().any(|x: &AlgorithmSpec| x.label == label) {
            return Err(invalid(
                format!("algorithm[{i}].name"),
                format!("duplicate label `{label}`"),
            ));
        }
        if label.contains(',') || label.contains('"') || label.contains('\n') {
            return Err(invalid(
                format!("algorithm[{i}].name"),
                "labels may not contain commas, quotes or newlines",
            ));
        }
        algorithms.push(AlgorithmSpec {
            label,
            algorithm: a.kind,
            solver: a.solver,
            codesign: a.codesign,
        });
    }
    if algorithms.is_empty() {
        algorithms.push(AlgorithmSpec::new(Algorithm::FedAvg));
    }

    let initial_model = match exp.initial_model {
        Some(v) if v.len() != problem.dim() => {
            return Err(invalid(
                "experiment.initial_model",
                format!("expected dimension {}", problem.dim()),
            ))
        }
        Some(v) => {
            ModelVector::new(v).map_err(|e| invalid("experiment.initial_model", e.to_string()))?
        }
        None => ModelVector::zeros(problem.dim()),
    };
    let clients_per_round = exp.clients_per_round.unwrap_or(m);
    if clients_per_round == 0 {
        return Err(invalid(
            "experiment.clients_per_round",
            "must be at least 1",
        ));
    }
    let replicates = exp.replicates.unwrap_or(1);
    if replicates == 0 {
        return Err(invalid("experiment.replicates", "must be at least 1"));
    }
    Ok(ExperimentConfig {
        name: exp.name.unwrap_or_else(|| "experiment".into()),
        rounds: exp.rounds.unwrap_or(100),
        clients_per_round,
        eta: positive("experiment.eta", exp.eta.unwrap_or(0.01))?,
        seed: exp.seed.unwrap_or(0),
        replicates,
        jobs: exp.jobs.unwrap_or(1).max(1),
        calibrate: exp.calibrate,
        initial_model,
        problem,
        population,
        algorithms,
        blowup_guard: positive(
            "experiment.blowup_guard",
            exp.blowup_guard.unwrap_or(DEFAULT_BLOWUP_GUARD),
        )?,
    })
}

/// Writes the header and one row per (trace, round); `round` counts completed rounds.
pub fn emit_csv<W: Write>(traces: &[RunTrace], out: &mut W) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for t in traces {
        for r in &t.records {
            write!(out, "{},{},{}", t.replicate, r.round + 1, t.algorithm)?;
            for name in CSV_METRICS {
                write!(out, ",{}", r.metric(name).unwrap_or(f64::NAN))?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}
