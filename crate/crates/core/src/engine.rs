//! Synchronous round loop: sample -> local solve -> transmit -> aggregate.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::aggregation::{self, Deltas, VarpMemory};
use crate::analysis::{self, CodesignFree};
use crate::channel::transmit;
use crate::config::ExperimentConfig;
use crate::error::{FedError, Result};
use crate::model::{Algorithm, ModelVector, Population, RoundRecord, SolverSpec, SurrogateStats};
use crate::problems::QuadraticProblem;
use crate::rng::{self, Purpose};
use crate::sampling::{self, ProbabilityVector};
use crate::solvers::{accumulation_vector, run_local_guarded, NoiseSpec};

/// How clients are drawn each round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampler {
    Importance,
    HeterogeneityAware,
    GradientNorm,
}

/// How the server combines delivered updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregator {
    Anonymous,
    CommunicationAware,
    StaleSubstitution,
    Normalized,
}

impl Algorithm {
    pub fn sampler(&self) -> Sampler {
        match self {
            Algorithm::FedAcs => Sampler::HeterogeneityAware,
            Algorithm::OptimalSampling => Sampler::GradientNorm,
            _ => Sampler::Importance,
        }
    }

    pub fn aggregator(&self) -> Aggregator {
        match self {
            Algorithm::FedAvg | Algorithm::FedAcs | Algorithm::OptimalSampling => {
                Aggregator::Anonymous
            }
            Algorithm::CaFedAvg => Aggregator::CommunicationAware,
            Algorithm::FedVarp => Aggregator::StaleSubstitution,
            Algorithm::FedNova => Aggregator::Normalized,
        }
    }
}

/// One algorithm entry of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct AlgorithmSpec {
    /// Label written to the CSV `algorithm` column.
    pub label: String,
    pub algorithm: Algorithm,
    /// Solver used by every client; `None` keeps each client's own solver.
    pub solver: Option<SolverSpec>,
    /// Replace the scheduled failure probabilities of clients `1..M` with the
    /// co-designed ones anchored at client 0.
    pub codesign: bool,
}

impl AlgorithmSpec {
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            label: algorithm.name().to_string(),
            algorithm,
            solver: None,
            codesign: false,
        }
    }
}

/// Everything a round needs besides the mutable state.
#[derive(Clone, Copy, Debug)]
pub struct RoundContext<'a> {
    pub problem: &'a QuadraticProblem,
    pub population: &'a Population,
    pub algo: &'a AlgorithmSpec,
    pub clients_per_round: usize,
    pub base_eta: f64,
    pub calibrate: bool,
    pub seed: u64,
    pub blowup_guard: f64,
    pub true_optimum: &'a ModelVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub model: ModelVector,
    pub memory: VarpMemory,
}

impl RunState {
    pub fn new(model: ModelVector, clients: usize) -> Self {
        Self {
            model,
            memory: VarpMemory::new(clients),
        }
    }
}

/// Per-round plan derived from the schedules before any randomness is drawn.
#[derive(Clone, Debug)]
pub struct RoundPlan {
    pub steps: Vec<u32>,
    pub failure: Vec<f64>,
    pub solvers: Vec<SolverSpec>,
    pub l1norms: Vec<f64>,
    pub eta: f64,
}

fn l1_for(solvers: &[SolverSpec], steps: &[u32], eta: f64) -> Result<Vec<f64>> {
    solvers
        .iter()
        .zip(steps)
        .map(|(s, t)| Ok(accumulation_vector(*s, *t, eta)?.l1()))
        .collect()
}

/// Resolves the round's `(T, q, solver, |a|_1, eta)` for `ctx.algo`.
pub fn plan_round(ctx: &RoundContext<'_>, round: u64) -> Result<RoundPlan> {
    let weights = ctx.population.weights();
    let (steps, scheduled) = ctx.population.conditions(round);
    let own: Vec<SolverSpec> = ctx.population.clients().iter().map(|c| c.solver).collect();
    let solvers: Vec<SolverSpec> = match ctx.algo.solver {
        Some(s) => vec![s; own.len()],
        None => own.clone(),
    };
    let base_l1 = l1_for(&solvers, &steps, ctx.base_eta)?;
    let failure = if ctx.algo.codesign {
        analysis::codesign_solve(
            &weights,
            scheduled[0],
            base_l1[0],
            CodesignFree::L1(base_l1.clone()),
        )?
        .failure
    } else {
        scheduled.clone()
    };
    let eta = if ctx.calibrate {
        // reference: FedAvg with every client's own solver on the scheduled links
        let reference_l1 = l1_for(&own, &steps, ctx.base_eta)?;
        let target = analysis::effective_step_product(
            Algorithm::FedAvg,
            ctx.base_eta,
            &weights,
            &scheduled,
            &reference_l1,
        )?;
        analysis::calibrated_eta(ctx.algo.algorithm, target, &weights, &failure, &base_l1)?
    } else {
        ctx.base_eta
    };
    let l1norms = if eta == ctx.base_eta {
        base_l1
    } else {
        l1_for(&solvers, &steps, eta)?
    };
    Ok(RoundPlan {
        steps,
        failure,
        solvers,
        l1norms,
        eta,
    })
}

fn sampling_probs(
    ctx: &RoundContext<'_>,
    plan: &RoundPlan,
    x: &ModelVector,
) -> Result<ProbabilityVector> {
    let weights = ctx.population.weights();
    match ctx.algo.algorithm.sampler() {
        Sampler::Importance => sampling::probs_importance(&weights),
        Sampler::HeterogeneityAware => {
            sampling::probs_fedacs(&weights, &plan.failure, &plan.l1norms)
        }
        Sampler::GradientNorm => {
            let norms: Vec<f64> = (0..ctx.problem.clients())
                .map(|m| ctx.problem.grad(m, x).norm())
                .collect();
            sampling::probs_optimal_sampling(&weights, &norms, sampling::NORM_FLOOR)
        }
    }
}

fn fednova_tau(weights: &[f64], plan: &RoundPlan) -> Result<f64> {
    Ok(analysis::surrogate_stats(weights, &plan.failure, &plan.l1norms, weights)?.t_eff)
}

/// Surrogate weights of the objective the algorithm follows in expectation.
pub fn effective_stats(
    algo: Algorithm,
    p: &[f64],
    weights: &[f64],
    plan: &RoundPlan,
) -> Result<SurrogateStats> {
    match algo.aggregator() {
        Aggregator::Anonymous => {
            analysis::surrogate_stats(p, &plan.failure, &plan.l1norms, weights)
        }
        Aggregator::CommunicationAware | Aggregator::StaleSubstitution => {
            analysis::surrogate_stats(p, &vec![0.0; p.len()], &plan.l1norms, weights)
        }
        Aggregator::Normalized => {
            let tau = fednova_tau(weights, plan)?;
            analysis::surrogate_stats(p, &plan.failure, &vec![tau; p.len()], weights)
        }
    }
}

/// Executes one round from `state` and returns the next state with its record.
pub fn run_round(
    ctx: &RoundContext<'_>,
    state: &RunState,
    round: u64,
) -> Result<(RunState, RoundRecord)> {
    let weights = ctx.population.weights();
    let plan = plan_round(ctx, round)?;
    let x = &state.model;
    let p = sampling_probs(ctx, &plan, x)?;

    let selected = sampling::draw_multiset(
        &p,
        ctx.clients_per_round,
        &mut rng::stream(ctx.seed, Purpose::Sampling, round, 0),
    );

    let noise = NoiseSpec {
        variance: ctx.problem.sigma_sq,
    };
    let mut deltas = Deltas::new();
    for &m in &selected {
        if deltas.contains_key(&m) {
            continue;
        }
        let mut local_rng = rng::stream(ctx.seed, Purpose::LocalNoise, round, m as u64);
        let run = run_local_guarded(
            x,
            &ctx.problem.client(m),
            plan.solvers[m],
            plan.steps[m],
            plan.eta,
            noise,
            &mut local_rng,
            ctx.blowup_guard,
        )?;
        deltas.insert(m, run.delta);
    }

    let delivered = transmit(
        &selected,
        &plan.failure,
        &mut rng::stream(ctx.seed, Purpose::Channel, round, 0),
    );

    let k = ctx.clients_per_round;
    let (model, memory) = match ctx.algo.algorithm.aggregator() {
        Aggregator::Anonymous => (
            aggregation::aggregate_anonymous(x, &delivered, &deltas, k, plan.eta)?,
            state.memory.clone(),
        ),
        Aggregator::CommunicationAware => (
            aggregation::aggregate_ca_fedavg(x, &delivered, &deltas, &plan.failure, k, plan.eta)?,
            state.memory.clone(),
        ),
        Aggregator::StaleSubstitution => aggregation::aggregate_fedvarp(
            x,
            &selected,
            &delivered,
            &deltas,
            &state.memory,
            k,
            plan.eta,
            round,
        )?,
        Aggregator::Normalized => {
            let tau = fednova_tau(&weights, &plan)?;
            (
                aggregation::aggregate_fednova(
                    x,
                    &delivered,
                    &deltas,
                    &plan.l1norms,
                    tau,
                    k,
                    plan.eta,
                )?,
                state.memory.clone(),
            )
        }
    };
    if model.norm() > ctx.blowup_guard {
        return Err(FedError::NumericalBlowup(format!(
            "global model norm {:e} at round {round}",
            model.norm()
        )));
    }

    let stats = effective_stats(ctx.algo.algorithm, &p, &weights, &plan)?;
    let surrogate_opt = ctx.problem.true_optimum(&stats.omega_eff)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("dist_true".to_string(), model.distance(ctx.true_optimum));
    metrics.insert("dist_surrogate".to_string(), model.distance(&surrogate_opt));
    metrics.insert(
        "grad_norm_sq".to_string(),
        ctx.problem.weighted_grad(&weights, &model).norm_sq(),
    );
    metrics.insert("chi_square".to_string(), stats.chi_square);
    metrics.insert("eta_eff".to_string(), plan.eta * stats.eta_eff);
    metrics.insert("t_eff".to_string(), stats.t_eff);
    metrics.insert("eta".to_string(), plan.eta);
    metrics.insert(
        "surrogate_grad_norm_sq_start".to_string(),
        ctx.problem.weighted_grad(&stats.omega_eff, x).norm_sq(),
    );
    metrics.insert(
        "a_max".to_string(),
        plan.l1norms.iter().copied().fold(0.0, f64::max),
    );

    let update = ModelVector::new(model.iter().zip(x.iter()).map(|(n, o)| n - o).collect())?;
    let record = RoundRecord {
        round,
        selected,
        delivered,
        update,
        metrics,
    };
    Ok((RunState { model, memory }, record))
}

/// Records of one (algorithm, replicate) run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    pub algorithm: String,
    pub replicate: usize,
    pub records: Vec<RoundRecord>,
    pub final_model: ModelVector,
}

/// Runs `rounds` rounds of one algorithm for one replicate seed.
pub fn run_single(
    config: &ExperimentConfig,
    algo: &AlgorithmSpec,
    replicate: usize,
) -> Result<RunTrace> {
    let weights = config.population.weights();
    let true_optimum = config.problem.true_optimum(&weights)?;
    let ctx = RoundContext {
        problem: &config.problem,
        population: &config.population,
        algo,
        clients_per_round: config.clients_per_round,
        base_eta: config.eta,
        calibrate: config.calibrate,
        seed: config.seed.wrapping_add(replicate as u64),
        blowup_guard: config.blowup_guard,
        true_optimum: &true_optimum,
    };
    let mut state = RunState::new(config.initial_model.clone(), config.population.len());
    let mut records = Vec::with_capacity(config.rounds as usize);
    for round in 0..config.rounds {
        let (next, record) = run_round(&ctx, &state, round)?;
        state = next;
        records.push(record);
    }
    Ok(RunTrace {
        algorithm: algo.label.clone(),
        replicate,
        records,
        final_model: state.model,
    })
}

/// Runs every algorithm for every replicate (replicate `i` uses seed `seed + i`).
///
/// Output is ordered by (replicate, algorithm position) regardless of `jobs`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunTrace>> {
    if config.replicates == 0 {
        return Err(FedError::InvalidArgument(
            "replicate count must be at least 1".into(),
        ));
    }
    let jobs: Vec<(usize, &AlgorithmSpec)> = (0..config.replicates)
        .flat_map(|r| config.algorithms.iter().map(move |a| (r, a)))
        .collect();
    let run = || {
        jobs.par_iter()
            .map(|(r, a)| run_single(config, a, *r))
            .collect::<Result<Vec<_>>>()
    };
    if config.jobs <= 1 {
        jobs.iter()
            .map(|(r, a)| run_single(config, a, *r))
            .collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| FedError::InvalidArgument(format!("thread pool: {e}")))?
            .install(run)
    }
}

/// Coordinate-wise mean of the final models of every replicate of `label`.
pub fn mean_final_model(traces: &[RunTrace], label: &str) -> Option<ModelVector> {
    let finals: Vec<&ModelVector> = traces
        .iter()
        .filter(|t| t.algorithm == label)
        .map(|t| &t.final_model)
        .collect();
    let first = finals.first()?;
    let mut mean = vec![0.0; first.dim()];
    for f in &finals {
        for (m, v) in mean.iter_mut().zip(f.iter()) {
            *m += v / finals.len() as f64;
        }
    }
    ModelVector::new(mean).ok()
}
