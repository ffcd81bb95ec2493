//! Server-side update rules. Every rule folds the delivered multiset in
//! ascending client-id order and divides by the fixed sampling count `K`.

use std::collections::BTreeMap;

use crate::error::{FedError, Result};
use crate::model::ModelVector;
use crate::sampling::DEGENERATE_MARGIN;

/// Cumulative updates keyed by client id.
pub type Deltas = BTreeMap<usize, ModelVector>;

/// Most recent successfully delivered update of every client.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VarpMemory {
    pub last_delta: Vec<Option<ModelVector>>,
    pub last_round: Vec<Option<u64>>,
}

impl VarpMemory {
    pub fn new(clients: usize) -> Self {
        Self {
            last_delta: vec![None; clients],
            last_round: vec![None; clients],
        }
    }
}

fn sorted(ids: &[usize]) -> Vec<usize> {
    let mut v = ids.to_vec();
    v.sort_unstable();
    v
}

fn fetch(deltas: &Deltas, m: usize) -> Result<&ModelVector> {
    deltas.get(&m).ok_or_else(|| {
        FedError::InvalidArgument(format!("no update supplied for delivered client {m}"))
    })
}

/// `x - eta / K * sum_i scale_i * delta_i`, checked for finiteness.
fn apply<'a, I>(x: &ModelVector, k: usize, eta: f64, terms: I) -> Result<ModelVector>
where
    I: IntoIterator<Item = (f64, &'a [f64])>,
{
    if k == 0 {
        return Err(FedError::InvalidArgument(
            "sampling count K must be >= 1".into(),
        ));
    }
    let mut sum = vec![0.0; x.dim()];
    for (scale, delta) in terms {
        if delta.len() != sum.len() {
            return Err(FedError::WrongShape(format!(
                "update of dimension {} for model of dimension {}",
                delta.len(),
                sum.len()
            )));
        }
        for (s, d) in sum.iter_mut().zip(delta) {
            *s += scale * d;
        }
    }
    let step = eta / k as f64;
    ModelVector::new(x.iter().zip(&sum).map(|(xi, si)| xi - step * si).collect())
}

/// Anonymous aggregation: `X + (1/K) sum_{delivered} (-eta delta_m)`, counting multiplicity.
pub fn aggregate_anonymous(
    x: &ModelVector,
    delivered: &[usize],
    deltas: &Deltas,
    k: usize,
    eta: f64,
) -> Result<ModelVector> {
    let ids = sorted(delivered);
    let terms = ids
        .iter()
        .map(|&m| Ok((1.0, fetch(deltas, m)?.as_slice())))
        .collect::<Result<Vec<_>>>()?;
    apply(x, k, eta, terms)
}

/// Communication-aware FedAvg: each delivered instance is scaled by `1 / (1 - q_m)`.
pub fn aggregate_ca_fedavg(
    x: &ModelVector,
    delivered: &[usize],
    deltas: &Deltas,
    failure: &[f64],
    k: usize,
    eta: f64,
) -> Result<ModelVector> {
    let ids = sorted(delivered);
    let terms = ids
        .iter()
        .map(|&m| {
            let q = failure[m];
            if q >= 1.0 - DEGENERATE_MARGIN {
                return Err(FedError::DegenerateLink { client: m, q });
            }
            Ok((1.0 / (1.0 - q), fetch(deltas, m)?.as_slice()))
        })
        .collect::<Result<Vec<_>>>()?;
    apply(x, k, eta, terms)
}

/// Instances of `selected` left over after removing `delivered` (multiset difference).
pub fn failed_instances(selected: &[usize], delivered: &[usize]) -> Vec<usize> {
    let mut remaining = sorted(delivered);
    let mut failed = Vec::new();
    for m in sorted(selected) {
        match remaining.iter().position(|&d| d == m) {
            Some(i) => {
                remaining.remove(i);
            }
            None => failed.push(m),
        }
    }
    failed
}

/// FedVarp-style aggregation: delivered instances contribute their fresh
/// update; selected-but-failed instances contribute the client's last
/// delivered update (zero if it never delivered). Memory is refreshed for
/// every delivered client after the sum is formed.
#[allow(clippy::too_many_arguments)]
pub fn aggregate_fedvarp(
    x: &ModelVector,
    selected: &[usize],
    delivered: &[usize],
    deltas: &Deltas,
    memory: &VarpMemory,
    k: usize,
    eta: f64,
    round: u64,
) -> Result<(ModelVector, VarpMemory)> {
    let fresh = sorted(delivered);
    let failed = failed_instances(selected, delivered);
    if failed.len() + fresh.len() != selected.len() {
        return Err(FedError::InvalidArgument(
            "delivered is not a sub-multiset of selected".into(),
        ));
    }
    let mut terms: Vec<(usize, f64, &[f64])> = Vec::with_capacity(selected.len());
    for &m in &fresh {
        terms.push((m, 1.0, fetch(deltas, m)?.as_slice()));
    }
    for &m in &failed {
        if let Some(stale) = memory.last_delta.get(m).and_then(Option::as_ref) {
            terms.push((m, 1.0, stale.as_slice()));
        }
    }
    terms.sort_by_key(|t| t.0);
    let next = apply(x, k, eta, terms.into_iter().map(|(_, s, d)| (s, d)))?;

    let mut memory = memory.clone();
    for &m in &fresh {
        memory.last_delta[m] = Some(fetch(deltas, m)?.clone());
        memory.last_round[m] = Some(round);
    }
    Ok((next, memory))
}

/// FedNova-style aggregation: each delivered update is normalized by its
/// accumulation norm and the sum is rescaled by `tau_eff`.
pub fn aggregate_fednova(
    x: &ModelVector,
    delivered: &[usize],
    deltas: &Deltas,
    l1norms: &[f64],
    tau_eff: f64,
    k: usize,
    eta: f64,
) -> Result<ModelVector> {
    let ids = sorted(delivered);
    let terms = ids
        .iter()
        .map(|&m| {
            let a = l1norms[m];
            if !(a > 0.0) {
                return Err(FedError::InvalidArgument(format!(
                    "client {m}: |a|_1 = {a} must be positive"
                )));
            }
            Ok((1.0 / a, fetch(deltas, m)?.as_slice()))
        })
        .collect::<Result<Vec<_>>>()?;
    apply(x, k, eta * tau_eff, terms)
}
