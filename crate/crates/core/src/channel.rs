//! Bernoulli link failures and the per-client heterogeneity schedules.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Purpose};

/// Conditions a client operates under in one round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundConditions {
    /// Number of local steps `T_m`.
    pub steps: u32,
    /// Link failure probability `q_m`.
    pub failure: f64,
}

/// Round-indexed law for a client's local step count and link failure probability.
///
/// Draws are a pure function of `(seed, client, round)`; static draws ignore the round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Schedule {
    Fixed {
        steps: u32,
        failure: f64,
    },
    /// Integer steps uniform on `steps[0]..=steps[1]`, failure uniform on `[failure[0], failure[1]]`.
    Uniform {
        steps: [u32; 2],
        failure: [f64; 2],
        per_round: bool,
        seed: u64,
    },
}

impl Schedule {
    pub fn at(&self, client: usize, round: u64) -> RoundConditions {
        match *self {
            Schedule::Fixed { steps, failure } => RoundConditions { steps, failure },
            Schedule::Uniform {
                steps,
                failure,
                per_round,
                seed,
            } => {
                let key = if per_round { round } else { u64::MAX };
                let mut rng = rng::stream(seed, Purpose::Schedule, client as u64, key);
                let t = rng.random_range(steps[0]..=steps[1]);
                let u: f64 = rng.random();
                let q = failure[0] + (failure[1] - failure[0]) * u;
                RoundConditions {
                    steps: t,
                    failure: q,
                }
            }
        }
    }

    /// Returns a human-readable reason when the schedule can emit `T = 0` or `q` outside `[0, 1)`.
    pub fn validate(&self) -> Result<(), String> {
        let (t_lo, t_hi, q_lo, q_hi) = match *self {
            Schedule::Fixed { steps, failure } => (steps, steps, failure, failure),
            Schedule::Uniform { steps, failure, .. } => {
                (steps[0], steps[1], failure[0], failure[1])
            }
        };
        if t_lo == 0 {
            return Err("local step count must be at least 1".into());
        }
        if t_lo > t_hi {
            return Err(format!("empty step range [{t_lo}, {t_hi}]"));
        }
        if !(q_lo.is_finite() && q_hi.is_finite()) || q_lo < 0.0 || q_lo > q_hi {
            return Err(format!("bad failure range [{q_lo}, {q_hi}]"));
        }
        if q_hi >= 1.0 {
            return Err(format!("failure probability {q_hi} must be below 1"));
        }
        Ok(())
    }
}

/// Same `(T, q)` in every round.
pub fn schedule_static(steps: u32, failure: f64) -> Schedule {
    Schedule::Fixed { steps, failure }
}

/// Uniform heterogeneity, either drawn once per client or redrawn every round.
pub fn schedule_uniform_random(
    steps: [u32; 2],
    failure: [f64; 2],
    per_round: bool,
    seed: u64,
) -> Schedule {
    Schedule::Uniform {
        steps,
        failure,
        per_round,
        seed,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupRanges {
    pub steps: [u32; 2],
    pub failure: [f64; 2],
}

/// Per-round draws for two client groups: ids below `split` use `first`, the rest use `second`.
pub fn schedule_two_group(
    clients: usize,
    split: usize,
    first: GroupRanges,
    second: GroupRanges,
    seed: u64,
) -> Vec<Schedule> {
    (0..clients)
        .map(|m| {
            let g = if m < split { first } else { second };
            schedule_uniform_random(g.steps, g.failure, true, seed)
        })
        .collect()
}

/// Keeps each selected instance independently with probability `1 - q_m`.
///
/// A client selected twice gets two independent link draws. Output preserves
/// the order of `selected`.
pub fn transmit<R: Rng + ?Sized>(selected: &[usize], failure: &[f64], rng: &mut R) -> Vec<usize> {
    selected
        .iter()
        .copied()
        .filter(|&m| {
            let u: f64 = rng.random();
            u >= failure[m]
        })
        .collect()
}
