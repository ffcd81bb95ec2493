//! Client sampling with replacement: probability vectors for importance,
//! uniform, gradient-norm and heterogeneity-aware (FedACS) sampling.

use rand::Rng;

use crate::error::{FedError, Result};

/// Default floor applied to gradient norms in optimal sampling.
pub const NORM_FLOOR: f64 = 1e-6;
/// Failure probabilities at or above `1 - DEGENERATE_MARGIN` are rejected by FedACS.
pub const DEGENERATE_MARGIN: f64 = 1e-9;

const SUM_TOL: f64 = 1e-10;

/// Sampling distribution over clients; strictly positive, sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(FedError::InvalidArgument("empty probability vector".into()));
        }
        if let Some(v) = p.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(FedError::InvalidArgument(format!(
                "probability {v} outside (0, 1]"
            )));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(FedError::InvalidArgument(format!(
                "probabilities sum to {sum}"
            )));
        }
        Ok(Self(p))
    }

    fn normalized(raw: Vec<f64>) -> Result<Self> {
        let total: f64 = raw.iter().sum();
        Self::new(raw.into_iter().map(|v| v / total).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Deref for ProbabilityVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Importance sampling: `p = omega`.
pub fn probs_importance(weights: &[f64]) -> Result<ProbabilityVector> {
    ProbabilityVector::new(weights.to_vec())
}

pub fn probs_uniform(clients: usize) -> Result<ProbabilityVector> {
    if clients == 0 {
        return Err(FedError::EmptyPopulation);
    }
    ProbabilityVector::new(vec![1.0 / clients as f64; clients])
}

/// `p_m ∝ omega_m * max(|grad F_m|, floor)`.
pub fn probs_optimal_sampling(
    weights: &[f64],
    grad_norms: &[f64],
    floor: f64,
) -> Result<ProbabilityVector> {
    if weights.len() != grad_norms.len() {
        return Err(FedError::InvalidArgument(
            "weights and norms differ in length".into(),
        ));
    }
    if grad_norms.iter().any(|n| !(*n >= 0.0) || !n.is_finite()) {
        return Err(FedError::InvalidArgument(format!(
            "gradient norms must be finite and >= 0: {grad_norms:?}"
        )));
    }
    if grad_norms.iter().all(|n| *n == 0.0) {
        return Err(FedError::AllZeroGradients);
    }
    let raw = weights
        .iter()
        .zip(grad_norms)
        .map(|(w, n)| w * n.max(floor))
        .collect();
    ProbabilityVector::normalized(raw)
}

/// Heterogeneity-aware sampling: `p_m ∝ omega_m / ((1 - q_m) |a_m|_1)`.
///
/// Under this choice `p_m (1 - q_m) |a_m|_1 / omega_m` is the same for every
/// client, so the aggregate follows the true objective.
pub fn probs_fedacs(
    weights: &[f64],
    failure: &[f64],
    l1norms: &[f64],
) -> Result<ProbabilityVector> {
    if weights.len() != failure.len() || weights.len() != l1norms.len() {
        return Err(FedError::InvalidArgument(
            "weights, failure and l1 lengths differ".into(),
        ));
    }
    let mut raw = Vec::with_capacity(weights.len());
    for (m, ((w, q), a)) in weights.iter().zip(failure).zip(l1norms).enumerate() {
        if *q >= 1.0 - DEGENERATE_MARGIN {
            return Err(FedError::DegenerateLink { client: m, q: *q });
        }
        if !(*a > 0.0) {
            return Err(FedError::InvalidArgument(format!(
                "client {m}: |a|_1 = {a} must be positive"
            )));
        }
        raw.push(w / ((1.0 - q) * a));
    }
    ProbabilityVector::normalized(raw)
}

/// Draws `k` client ids independently from `p` by inverse CDF, one uniform
/// per draw. The result is sorted by id.
pub fn draw_multiset<R: Rng + ?Sized>(p: &ProbabilityVector, k: usize, rng: &mut R) -> Vec<usize> {
    let mut cdf = Vec::with_capacity(p.len());
    let mut acc = 0.0;
    for v in p.iter() {
        acc += v;
        cdf.push(acc);
    }
    let last = p.len() - 1;
    let mut out: Vec<usize> = (0..k)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * acc;
            cdf.partition_point(|c| *c <= u).min(last)
        })
        .collect();
    out.sort_unstable();
    out
}
