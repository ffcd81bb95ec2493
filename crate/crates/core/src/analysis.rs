//! Analytical quantities of heterogeneous federated training: surrogate
//! weights and effective constants, convergence bounds, the consistency
//! (co-design) condition and step-length calibration across algorithms.

use std::collections::BTreeMap;

use crate::error::{FedError, Result};
use crate::model::{Algorithm, ModelVector, SurrogateStats};
use crate::sampling::probs_fedacs;

/// `|Omega - omega|_inf` at or below this counts as a consistent objective.
pub const CONSISTENCY_TOL: f64 = 1e-10;

fn check_lengths(n: usize, others: &[(&str, usize)]) -> Result<()> {
    for (name, len) in others {
        if *len != n {
            return Err(FedError::InvalidArgument(format!(
                "{name} has length {len}, expected {n}"
            )));
        }
    }
    if n == 0 {
        return Err(FedError::EmptyPopulation);
    }
    Ok(())
}

/// Chi-square divergence `sum_m (omega_m - Omega_m)^2 / Omega_m`, snapped to
/// exactly zero when the two weight vectors agree within [`CONSISTENCY_TOL`].
pub fn chi_square(weights: &[f64], omega_eff: &[f64]) -> f64 {
    let max_dev = weights
        .iter()
        .zip(omega_eff)
        .map(|(w, o)| (w - o).abs())
        .fold(0.0, f64::max);
    if max_dev <= CONSISTENCY_TOL {
        return 0.0;
    }
    weights
        .iter()
        .zip(omega_eff)
        .map(|(w, o)| (w - o) * (w - o) / o)
        .sum()
}

/// Weights of the objective that anonymous aggregation actually follows
/// under sampling `p`, failure probabilities `q` and accumulation norms.
pub fn surrogate_stats(
    p: &[f64],
    failure: &[f64],
    l1norms: &[f64],
    weights: &[f64],
) -> Result<SurrogateStats> {
    check_lengths(
        p.len(),
        &[
            ("failure", failure.len()),
            ("l1norms", l1norms.len()),
            ("weights", weights.len()),
        ],
    )?;
    let delivered: Vec<f64> = p.iter().zip(failure).map(|(p, q)| p * (1.0 - q)).collect();
    let eta_eff: f64 = delivered.iter().sum();
    if !(eta_eff > 0.0) {
        return Err(FedError::InvalidArgument(
            "no client can ever deliver".into(),
        ));
    }
    let gamma: Vec<f64> = delivered.iter().map(|d| d / eta_eff).collect();
    let t_eff: f64 = gamma.iter().zip(l1norms).map(|(g, a)| g * a).sum();
    let omega_eff: Vec<f64> = gamma
        .iter()
        .zip(l1norms)
        .map(|(g, a)| g * a / t_eff)
        .collect();
    let chi_square = chi_square(weights, &omega_eff);
    Ok(SurrogateStats {
        gamma,
        omega_eff,
        eta_eff,
        t_eff,
        chi_square,
    })
}

/// Minimizer `sum_m Omega_m E_m` of the surrogate of `F_m = |X - E_m|^2 / 2`.
pub fn surrogate_optimum_quadratic(targets: &[ModelVector], omega: &[f64]) -> Result<ModelVector> {
    check_lengths(targets.len(), &[("omega", omega.len())])?;
    let d = targets[0].dim();
    let mut x = vec![0.0; d];
    for (e, w) in targets.iter().zip(omega) {
        for (xi, ei) in x.iter_mut().zip(e.iter()) {
            *xi += w * ei;
        }
    }
    ModelVector::new(x)
}

/// Problem constants entering the surrogate convergence bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundConstants {
    /// Smoothness `L`.
    pub smoothness: f64,
    pub beta_sq: f64,
    pub kappa_sq: f64,
    pub sigma_sq: f64,
    /// `A = max_m |a_m|_1`.
    pub a_max: f64,
}

/// Left side of the small-step condition; the surrogate bound applies when this is `<= 1/4`.
pub fn small_step_margin(eta: f64, smoothness: f64, a_max: f64) -> f64 {
    let ela = eta * smoothness * a_max;
    let sq = ela * ela;
    let frac = sq / (1.0 - 2.0 * sq);
    frac + ela * 2.0 * frac + ela
}

/// `rho(eta, L, A)` from the per-round descent inequality; tends to 1/2 as `eta -> 0`.
pub fn descent_rho(eta: f64, smoothness: f64, a_max: f64) -> f64 {
    let ela = eta * smoothness * a_max;
    (2.0 * ela + 1.0) * (ela * ela / (1.0 - 2.0 * ela * ela) + 0.5)
}

/// Bound on the average squared surrogate gradient norm over `rounds` rounds.
///
/// `eta_eff` here is the effective learning rate (learning rate times the
/// delivery factor), `gap` is `F~(X_0) - F~*`.
pub fn theorem1_bound(
    gap: f64,
    eta: f64,
    eta_eff: f64,
    t_eff: f64,
    rounds: u64,
    c: &BoundConstants,
) -> f64 {
    let step = eta_eff * t_eff;
    4.0 * gap / (step * rounds as f64)
        + step * c.kappa_sq / c.beta_sq
        + 2.0 * eta * c.smoothness * c.a_max * c.a_max * c.sigma_sq / t_eff
}

/// Limits of the averaged true-gradient norm: `(chi^2 kappa^2, chi^2 kappa^2 + sigma^2)`.
pub fn theorem2_limit(chi_square: f64, kappa_sq: f64, sigma_sq: f64) -> (f64, f64) {
    let floor = chi_square * kappa_sq;
    (floor, floor + sigma_sq)
}

/// Bounds relating the inconsistent fixed point to the true optimum.
///
/// Returns `(min_distance, max_grad_norm)`: the distance `|X~* - X*|` is at
/// least `|grad F(X~*)| / L`, and `|grad F(X~*)|` itself is at most
/// `sqrt(chi^2) * kappa`.
pub fn inconsistency_distance_bounds(
    grad_norm_at_surrogate: f64,
    smoothness: f64,
    chi_square: f64,
    kappa_sq: f64,
) -> (f64, f64) {
    (
        grad_norm_at_surrogate / smoothness,
        (chi_square * kappa_sq).sqrt(),
    )
}

/// Which half of the link/computation pair is given to [`codesign_solve`].
#[derive(Clone, Debug, PartialEq)]
pub enum CodesignFree {
    /// Failure probabilities of all clients; accumulation norms are derived.
    Failure(Vec<f64>),
    /// Accumulation norms of all clients; failure probabilities are derived.
    L1(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodesignSolution {
    pub failure: Vec<f64>,
    pub l1norms: Vec<f64>,
    /// `sum_m omega_m (1 - q_m)`.
    pub eta_eff: f64,
    pub t_eff: f64,
}

/// Completes `(q, |a|_1)` so that `(1 - q_m) |a_m|_1` is the same for every
/// client, anchored at client 0.
pub fn codesign_solve(
    weights: &[f64],
    anchor_failure: f64,
    anchor_l1: f64,
    free: CodesignFree,
) -> Result<CodesignSolution> {
    if !(0.0..1.0).contains(&anchor_failure) || !(anchor_l1 > 0.0) {
        return Err(FedError::Infeasible(format!(
            "anchor (q = {anchor_failure}, |a|_1 = {anchor_l1}) is not a valid client"
        )));
    }
    let product = (1.0 - anchor_failure) * anchor_l1;
    let (failure, l1norms) = match free {
        CodesignFree::Failure(q) => {
            check_lengths(weights.len(), &[("failure", q.len())])?;
            if (q[0] - anchor_failure).abs() > 1e-12 {
                return Err(FedError::Infeasible(format!(
                    "q[0] = {} disagrees with anchor {anchor_failure}",
                    q[0]
                )));
            }
            let mut l1 = Vec::with_capacity(q.len());
            for (m, qm) in q.iter().enumerate() {
                if !(0.0..1.0).contains(qm) {
                    return Err(FedError::Infeasible(format!(
                        "client {m}: q = {qm} outside [0, 1)"
                    )));
                }
                l1.push(if m == 0 {
                    anchor_l1
                } else {
                    product / (1.0 - qm)
                });
            }
            let mut q = q;
            q[0] = anchor_failure;
            (q, l1)
        }
        CodesignFree::L1(l1) => {
            check_lengths(weights.len(), &[("l1norms", l1.len())])?;
            if (l1[0] - anchor_l1).abs() > 1e-12 * anchor_l1 {
                return Err(FedError::Infeasible(format!(
                    "|a_0|_1 = {} disagrees with anchor {anchor_l1}",
                    l1[0]
                )));
            }
            let mut q = Vec::with_capacity(l1.len());
            for (m, a) in l1.iter().enumerate() {
                if !(*a > 0.0) {
                    return Err(FedError::Infeasible(format!(
                        "client {m}: |a|_1 = {a} must be positive"
                    )));
                }
                let qm = if m == 0 {
                    anchor_failure
                } else {
                    1.0 - product / a
                };
                if !(0.0..1.0).contains(&qm) {
                    return Err(FedError::Infeasible(format!(
                        "client {m}: required failure probability {qm} outside [0, 1)"
                    )));
                }
                q.push(qm);
            }
            let mut l1 = l1;
            l1[0] = anchor_l1;
            (q, l1)
        }
    };
    let eta_eff: f64 = weights
        .iter()
        .zip(&failure)
        .map(|(w, q)| w * (1.0 - q))
        .sum();
    Ok(CodesignSolution {
        failure,
        l1norms,
        eta_eff,
        t_eff: product / eta_eff,
    })
}

/// Coefficient matrix `W` of the consistency system `W (1 - q) = 0`, where
/// `W[i][j] = (omega_j - [i == j]) |a_j|_1`, together with the residual of
/// the row dependency `sum_m omega_m w_m = 0` (max-norm).
pub fn build_w_and_check_rank(weights: &[f64], l1norms: &[f64]) -> Result<(Vec<Vec<f64>>, f64)> {
    check_lengths(weights.len(), &[("l1norms", l1norms.len())])?;
    let m = weights.len();
    let w: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| (weights[j] - if i == j { 1.0 } else { 0.0 }) * l1norms[j])
                .collect()
        })
        .collect();
    let residual = (0..m)
        .map(|j| (0..m).map(|i| weights[i] * w[i][j]).sum::<f64>().abs())
        .fold(0.0, f64::max);
    Ok((w, residual))
}

/// `|W (1 - q)|_inf`; zero exactly when `(1 - q_m)|a_m|_1` is constant.
pub fn consistency_residual(w: &[Vec<f64>], failure: &[f64]) -> f64 {
    w.iter()
        .map(|row| {
            row.iter()
                .zip(failure)
                .map(|(wij, q)| wij * (1.0 - q))
                .sum::<f64>()
                .abs()
        })
        .fold(0.0, f64::max)
}

fn weighted_sum<F: Fn(usize) -> f64>(n: usize, f: F) -> f64 {
    (0..n).map(f).sum()
}

/// Learning rate that gives `algo` the effective step `target = eta_eff * T_eff`.
pub fn calibrated_eta(
    algo: Algorithm,
    target: f64,
    weights: &[f64],
    failure: &[f64],
    l1norms: &[f64],
) -> Result<f64> {
    check_lengths(
        weights.len(),
        &[("failure", failure.len()), ("l1norms", l1norms.len())],
    )?;
    let n = weights.len();
    Ok(match algo {
        Algorithm::FedAvg | Algorithm::FedNova | Algorithm::OptimalSampling => {
            target / weighted_sum(n, |m| weights[m] * (1.0 - failure[m]) * l1norms[m])
        }
        Algorithm::FedAcs => {
            target * weighted_sum(n, |m| weights[m] / ((1.0 - failure[m]) * l1norms[m]))
        }
        Algorithm::CaFedAvg | Algorithm::FedVarp => {
            target / weighted_sum(n, |m| weights[m] * l1norms[m])
        }
    })
}

/// Effective step `eta_eff * T_eff` of `algo` at learning rate `eta`,
/// computed from the expected aggregate of each scheme.
pub fn effective_step_product(
    algo: Algorithm,
    eta: f64,
    weights: &[f64],
    failure: &[f64],
    l1norms: &[f64],
) -> Result<f64> {
    let s = match algo {
        Algorithm::FedAvg | Algorithm::OptimalSampling => {
            surrogate_stats(weights, failure, l1norms, weights)?
        }
        Algorithm::FedAcs => {
            let p = probs_fedacs(weights, failure, l1norms)?;
            surrogate_stats(&p, failure, l1norms, weights)?
        }
        // inverse-probability scaling undoes the channel in expectation
        Algorithm::CaFedAvg | Algorithm::FedVarp => {
            surrogate_stats(weights, &vec![0.0; weights.len()], l1norms, weights)?
        }
        Algorithm::FedNova => {
            let tau = surrogate_stats(weights, failure, l1norms, weights)?.t_eff;
            surrogate_stats(weights, failure, &vec![tau; weights.len()], weights)?
        }
    };
    Ok(eta * s.eta_eff * s.t_eff)
}

/// Learning rates for every algorithm so that all share FedAvg's effective
/// step at learning rate `base_eta`.
pub fn calibrate_step_lengths(
    base_eta: f64,
    weights: &[f64],
    failure: &[f64],
    l1norms: &[f64],
) -> Result<BTreeMap<Algorithm, f64>> {
    if !(base_eta > 0.0) {
        return Err(FedError::InvalidArgument(format!(
            "base learning rate must be positive, got {base_eta}"
        )));
    }
    let target = effective_step_product(Algorithm::FedAvg, base_eta, weights, failure, l1norms)?;
    Algorithm::ALL
        .into_iter()
        .map(|a| Ok((a, calibrated_eta(a, target, weights, failure, l1norms)?)))
        .collect()
}
