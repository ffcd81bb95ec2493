//! Domain types shared across the simulator: client profiles, solver
//! configurations, accumulation vectors, model vectors and per-round records.

use std::collections::BTreeMap;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::channel::Schedule;
use crate::error::{FedError, Result};

/// Tolerance on `sum(weights) == 1` for a client population.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Dense real parameter vector. Entries are always finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ModelVector(Vec<f64>);

impl ModelVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if let Some(i) = entries.iter().position(|v| !v.is_finite()) {
            return Err(FedError::NumericalBlowup(format!(
                "non-finite entry {} at coordinate {i}",
                entries[i]
            )));
        }
        Ok(Self(entries))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Euclidean distance to `other`.
    pub fn distance(&self, other: &ModelVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl Deref for ModelVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for ModelVector {
    type Error = FedError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ModelVector> for Vec<f64> {
    fn from(v: ModelVector) -> Self {
        v.0
    }
}

/// Local optimizer run by a selected client.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SolverSpec {
    #[default]
    #[serde(rename = "sgd")]
    PlainSgd,
    #[serde(rename = "momentum")]
    MomentumSgd { rho: f64 },
    #[serde(rename = "proximal")]
    ProximalSgd { mu: f64 },
    /// Learning rate multiplied by `1 - decay` after every local step.
    #[serde(rename = "decayed")]
    DecayedSgd { decay: f64 },
}

impl SolverSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SolverSpec::PlainSgd => Ok(()),
            SolverSpec::MomentumSgd { rho } if (0.0..1.0).contains(&rho) => Ok(()),
            SolverSpec::ProximalSgd { mu } if mu >= 0.0 && mu.is_finite() => Ok(()),
            SolverSpec::DecayedSgd { decay } if (0.0..1.0).contains(&decay) => Ok(()),
            other => Err(FedError::BadSolver(format!("{other:?}"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SolverSpec::PlainSgd => "sgd",
            SolverSpec::MomentumSgd { .. } => "momentum",
            SolverSpec::ProximalSgd { .. } => "proximal",
            SolverSpec::DecayedSgd { .. } => "decayed",
        }
    }
}

/// Per-step gradient coefficients of a local solver together with their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct AccumulationVector {
    coeffs: Vec<f64>,
    l1: f64,
}

impl AccumulationVector {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(FedError::InvalidArgument(
                "empty accumulation vector".into(),
            ));
        }
        if coeffs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(FedError::InvalidArgument(format!(
                "accumulation coefficients must be finite and non-negative: {coeffs:?}"
            )));
        }
        let l1: f64 = coeffs.iter().sum();
        if l1 <= 0.0 {
            return Err(FedError::InvalidArgument(
                "accumulation vector sums to zero".into(),
            ));
        }
        Ok(Self { coeffs, l1 })
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn l1(&self) -> f64 {
        self.l1
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }
}

/// Federated training algorithm: a (sampler, aggregator) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    /// Importance sampling + anonymous aggregation.
    #[serde(rename = "fedavg")]
    FedAvg,
    /// Heterogeneity-aware sampling + anonymous aggregation.
    #[serde(rename = "fedacs")]
    FedAcs,
    /// Importance sampling + inverse-delivery-probability scaling.
    #[serde(rename = "ca-fedavg")]
    CaFedAvg,
    /// Importance sampling + stale updates substituted for failed transmissions.
    #[serde(rename = "fedvarp")]
    FedVarp,
    /// Importance sampling + normalized updates.
    #[serde(rename = "fednova")]
    FedNova,
    /// Gradient-norm sampling + anonymous aggregation.
    #[serde(rename = "optimal-sampling")]
    OptimalSampling,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::FedAvg,
        Algorithm::FedAcs,
        Algorithm::CaFedAvg,
        Algorithm::FedVarp,
        Algorithm::FedNova,
        Algorithm::OptimalSampling,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedAcs => "fedacs",
            Algorithm::CaFedAvg => "ca-fedavg",
            Algorithm::FedVarp => "fedvarp",
            Algorithm::FedNova => "fednova",
            Algorithm::OptimalSampling => "optimal-sampling",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| FedError::InvalidArgument(format!("unknown algorithm `{s}`")))
    }
}

/// Static identity of one client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientProfile {
    pub id: usize,
    pub weight: f64,
    pub schedule: Schedule,
    #[serde(default)]
    pub solver: SolverSpec,
}

/// Checks every population-level invariant: ids are exactly `0..M`, weights
/// are positive and sum to one, schedules never yield `q >= 1` or zero steps,
/// and solver parameters are in range.
pub fn validate_population(profiles: &[ClientProfile]) -> Result<()> {
    if profiles.is_empty() {
        return Err(FedError::EmptyPopulation);
    }
    let m = profiles.len();
    let mut seen = vec![false; m];
    for p in profiles {
        if p.id >= m || seen[p.id] {
            return Err(FedError::DuplicateId { id: p.id });
        }
        seen[p.id] = true;
        if !(p.weight > 0.0 && p.weight <= 1.0) {
            return Err(FedError::BadWeight {
                client: p.id,
                weight: p.weight,
            });
        }
        p.schedule
            .validate()
            .map_err(|reason| FedError::BadSchedule {
                client: p.id,
                reason,
            })?;
        p.solver.validate()?;
    }
    let sum: f64 = profiles.iter().map(|p| p.weight).sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(FedError::WeightSumError { sum });
    }
    Ok(())
}

/// A validated client population, ordered by id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClientProfile>", into = "Vec<ClientProfile>")]
pub struct Population {
    clients: Vec<ClientProfile>,
}

impl Population {
    pub fn new(mut clients: Vec<ClientProfile>) -> Result<Self> {
        validate_population(&clients)?;
        clients.sort_by_key(|c| c.id);
        Ok(Self { clients })
    }

    pub fn clients(&self) -> &[ClientProfile] {
        &self.clients
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.clients.iter().map(|c| c.weight).collect()
    }

    /// `(T_m, q_m)` for every client at `round`.
    pub fn conditions(&self, round: u64) -> (Vec<u32>, Vec<f64>) {
        self.clients
            .iter()
            .map(|c| {
                let d = c.schedule.at(c.id, round);
                (d.steps, d.failure)
            })
            .unzip()
    }
}

impl TryFrom<Vec<ClientProfile>> for Population {
    type Error = FedError;

    fn try_from(v: Vec<ClientProfile>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Population> for Vec<ClientProfile> {
    fn from(p: Population) -> Self {
        p.clients
    }
}

/// Per-round quantities describing which objective the aggregate follows.
///
/// `eta_eff` is the unitless factor `sum_m p_m (1 - q_m)`; multiply by the
/// learning rate to get the effective learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateStats {
    pub gamma: Vec<f64>,
    pub omega_eff: Vec<f64>,
    pub eta_eff: f64,
    pub t_eff: f64,
    pub chi_square: f64,
}

/// One training round as observed by the server.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    pub selected: Vec<usize>,
    pub delivered: Vec<usize>,
    pub update: ModelVector,
    pub metrics: BTreeMap<String, f64>,
}

impl RoundRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn client(id: usize, weight: f64, q: f64, steps: u32) -> ClientProfile {
        ClientProfile {
            id,
            weight,
            schedule: Schedule::Fixed { steps, failure: q },
            solver: SolverSpec::PlainSgd,
        }
    }

    #[test]
    fn symmetric_pair_is_valid() {
        let pop = vec![client(0, 0.5, 0.1, 2), client(1, 0.5, 0.0, 3)];
        assert!(validate_population(&pop).is_ok());
    }

    #[test]
    fn weights_must_sum_to_one() {
        let pop = vec![client(0, 0.6, 0.0, 1), client(1, 0.6, 0.0, 1)];
        assert!(matches!(
            validate_population(&pop),
            Err(FedError::WeightSumError { .. })
        ));
    }

    #[test]
    fn certain_failure_is_rejected() {
        let pop = vec![client(0, 0.5, 0.0, 1), client(1, 0.5, 1.0, 1)];
        assert!(matches!(
            validate_population(&pop),
            Err(FedError::BadSchedule { client: 1, .. })
        ));
    }

    #[test]
    fn zero_steps_rejected() {
        let pop = vec![client(0, 1.0, 0.0, 0)];
        assert!(matches!(
            validate_population(&pop),
            Err(FedError::BadSchedule { .. })
        ));
    }

    #[test]
    fn ids_must_be_dense() {
        let pop = vec![client(0, 0.5, 0.0, 1), client(0, 0.5, 0.0, 1)];
        assert_eq!(
            validate_population(&pop),
            Err(FedError::DuplicateId { id: 0 })
        );
        let gap = vec![client(0, 0.5, 0.0, 1), client(2, 0.5, 0.0, 1)];
        assert_eq!(
            validate_population(&gap),
            Err(FedError::DuplicateId { id: 2 })
        );
        assert_eq!(validate_population(&[]), Err(FedError::EmptyPopulation));
    }

    #[test]
    fn model_vector_rejects_nan() {
        assert!(ModelVector::new(vec![0.0, f64::NAN]).is_err());
        assert!(ModelVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn accumulation_vector_caches_sum() {
        let a = AccumulationVector::new(vec![1.3, 1.0]).unwrap();
        assert!((a.l1() - 2.3).abs() < 1e-12);
        assert!(AccumulationVector::new(vec![0.0, 0.0]).is_err());
        assert!(AccumulationVector::new(vec![1.0, -0.5]).is_err());
    }

    #[test]
    fn solver_ranges() {
        assert!(SolverSpec::MomentumSgd { rho: 1.0 }.validate().is_err());
        assert!(SolverSpec::ProximalSgd { mu: -0.1 }.validate().is_err());
        assert!(SolverSpec::DecayedSgd { decay: 0.005 }.validate().is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_schedule() -> impl Strategy<Value = Schedule> {
            prop_oneof![
                (1u32..40, 0.0f64..0.99)
                    .prop_map(|(steps, failure)| Schedule::Fixed { steps, failure }),
                (
                    1u32..20,
                    0u32..20,
                    0.0f64..0.5,
                    0.0f64..0.49,
                    any::<bool>(),
                    any::<u64>()
                )
                    .prop_map(|(lo, extra, qlo, qspan, per_round, seed)| {
                        Schedule::Uniform {
                            steps: [lo, lo + extra],
                            failure: [qlo, qlo + qspan],
                            per_round,
                            seed,
                        }
                    }),
            ]
        }

        fn arb_solver() -> impl Strategy<Value = SolverSpec> {
            prop_oneof![
                Just(SolverSpec::PlainSgd),
                (0.0f64..0.99).prop_map(|rho| SolverSpec::MomentumSgd { rho }),
                (0.0f64..10.0).prop_map(|mu| SolverSpec::ProximalSgd { mu }),
                (0.0f64..0.99).prop_map(|decay| SolverSpec::DecayedSgd { decay }),
            ]
        }

        proptest! {
            #[test]
            fn valid_population_roundtrips_bit_exact(
                raw in prop::collection::vec((0.01f64..1.0, arb_schedule(), arb_solver()), 1..12)
            ) {
                let total: f64 = raw.iter().map(|r| r.0).sum();
                let mut clients: Vec<ClientProfile> = raw
                    .into_iter()
                    .enumerate()
                    .map(|(id, (w, schedule, solver))| ClientProfile { id, weight: w / total, schedule, solver })
                    .collect();
                // absorb rounding into the last weight
                let head: f64 = clients[..clients.len() - 1].iter().map(|c| c.weight).sum();
                let last = clients.len() - 1;
                clients[last].weight = 1.0 - head;
                prop_assume!(validate_population(&clients).is_ok());
                let pop = Population::new(clients).unwrap();
                let text = serde_json::to_string(&pop).unwrap();
                let back: Population = serde_json::from_str(&text).unwrap();
                prop_assert_eq!(&back, &pop);
                for (a, b) in back.clients().iter().zip(pop.clients()) {
                    prop_assert_eq!(a.weight.to_bits(), b.weight.to_bits());
                }
            }
        }
    }
}
