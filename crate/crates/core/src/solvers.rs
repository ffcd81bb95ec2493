//! Local solvers. A selected client runs `T` optimizer steps from the
//! current global model; the cumulative update it reports is
//! `delta = sum_t a_t * g_t`, with `a` the solver's accumulation vector.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{FedError, Result};
use crate::model::{AccumulationVector, ModelVector, SolverSpec};

/// Default bound on the local iterate norm before a run is declared divergent.
pub const DEFAULT_BLOWUP_GUARD: f64 = 1e12;

/// Gradient oracle of one client's local objective.
pub trait LocalObjective {
    fn dim(&self) -> usize;
    fn gradient(&self, x: &[f64], out: &mut [f64]);
}

/// Objective with constant gradient.
#[derive(Clone, Debug)]
pub struct LinearObjective {
    pub gradient: Vec<f64>,
}

impl LocalObjective for LinearObjective {
    fn dim(&self) -> usize {
        self.gradient.len()
    }

    fn gradient(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.gradient);
    }
}

/// Additive isotropic Gaussian gradient noise with total variance `variance`
/// (each of the `d` coordinates gets `variance / d`).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NoiseSpec {
    pub variance: f64,
}

impl NoiseSpec {
    pub const NONE: NoiseSpec = NoiseSpec { variance: 0.0 };
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalRunResult {
    /// Cumulative stochastic gradient; the local model moved by `-eta * delta`.
    pub delta: ModelVector,
    pub steps: u32,
    pub accum: AccumulationVector,
}

/// Closed-form accumulation vector of `spec` over `steps` local iterations.
pub fn accumulation_vector(spec: SolverSpec, steps: u32, eta: f64) -> Result<AccumulationVector> {
    spec.validate()?;
    if steps == 0 {
        return Err(FedError::InvalidArgument(
            "local step count must be >= 1".into(),
        ));
    }
    let t_max = steps as i32;
    let coeffs: Vec<f64> = match spec {
        SolverSpec::PlainSgd => vec![1.0; steps as usize],
        SolverSpec::MomentumSgd { rho } => (1..=t_max)
            .map(|t| (1.0 - rho.powi(t_max - t + 1)) / (1.0 - rho))
            .collect(),
        SolverSpec::ProximalSgd { mu } => {
            let shrink = eta * mu;
            if shrink >= 1.0 {
                return Err(FedError::NonContractive { product: shrink });
            }
            (1..=t_max)
                .map(|t| (1.0 - shrink).powi(t_max - t))
                .collect()
        }
        SolverSpec::DecayedSgd { decay } => {
            (1..=t_max).map(|t| (1.0 - decay).powi(t - 1)).collect()
        }
    };
    AccumulationVector::new(coeffs)
}

/// Shared optimizer loop. `grad_at(t, x, out)` fills the (possibly noisy)
/// gradient used at step `t` (1-based). Returns the final iterate.
fn iterate<F>(
    spec: SolverSpec,
    steps: u32,
    eta: f64,
    start: &[f64],
    guard: f64,
    mut grad_at: F,
) -> Result<Vec<f64>>
where
    F: FnMut(u32, &[f64], &mut [f64]),
{
    let d = start.len();
    let mut x = start.to_vec();
    let mut g = vec![0.0; d];
    let mut buf = vec![0.0; d];
    let mut lr = eta;
    for t in 1..=steps {
        grad_at(t, &x, &mut g);
        match spec {
            SolverSpec::PlainSgd => {
                for (xi, gi) in x.iter_mut().zip(&g) {
                    *xi -= eta * gi;
                }
            }
            SolverSpec::MomentumSgd { rho } => {
                for ((xi, bi), gi) in x.iter_mut().zip(buf.iter_mut()).zip(&g) {
                    *bi = rho * *bi + gi;
                    *xi -= eta * *bi;
                }
            }
            SolverSpec::ProximalSgd { mu } => {
                for ((xi, x0), gi) in x.iter_mut().zip(start).zip(&g) {
                    *xi -= eta * (gi + mu * (*xi - x0));
                }
            }
            SolverSpec::DecayedSgd { decay } => {
                for (xi, gi) in x.iter_mut().zip(&g) {
                    *xi -= lr * gi;
                }
                lr *= 1.0 - decay;
            }
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > guard {
            return Err(FedError::NumericalBlowup(format!(
                "local iterate norm {norm:e} exceeded guard {guard:e} at step {t}"
            )));
        }
    }
    Ok(x)
}

/// Runs `steps` iterations of `spec` on `objective` from `start`.
#[allow(clippy::too_many_arguments)]
pub fn run_local_guarded<O, R>(
    start: &ModelVector,
    objective: &O,
    spec: SolverSpec,
    steps: u32,
    eta: f64,
    noise: NoiseSpec,
    rng: &mut R,
    guard: f64,
) -> Result<LocalRunResult>
where
    O: LocalObjective + ?Sized,
    R: Rng + ?Sized,
{
    if !(eta > 0.0) {
        return Err(FedError::InvalidArgument(format!(
            "learning rate must be positive, got {eta}"
        )));
    }
    if noise.variance < 0.0 {
        return Err(FedError::InvalidArgument(
            "noise variance must be >= 0".into(),
        ));
    }
    let accum = accumulation_vector(spec, steps, eta)?;
    let d = start.dim();
    let normal = if noise.variance > 0.0 {
        Some(Normal::new(0.0, (noise.variance / d as f64).sqrt()).expect("finite std"))
    } else {
        None
    };
    let end = iterate(spec, steps, eta, start, guard, |_, x, out| {
        objective.gradient(x, out);
        if let Some(n) = &normal {
            for o in out.iter_mut() {
                *o += n.sample(rng);
            }
        }
    })?;
    let delta: Vec<f64> = start.iter().zip(&end).map(|(s, e)| (s - e) / eta).collect();
    Ok(LocalRunResult {
        delta: ModelVector::new(delta)?,
        steps,
        accum,
    })
}

/// [`run_local_guarded`] with [`DEFAULT_BLOWUP_GUARD`].
pub fn run_local<O, R>(
    start: &ModelVector,
    objective: &O,
    spec: SolverSpec,
    steps: u32,
    eta: f64,
    noise: NoiseSpec,
    rng: &mut R,
) -> Result<LocalRunResult>
where
    O: LocalObjective + ?Sized,
    R: Rng + ?Sized,
{
    run_local_guarded(
        start,
        objective,
        spec,
        steps,
        eta,
        noise,
        rng,
        DEFAULT_BLOWUP_GUARD,
    )
}

/// Reads the accumulation vector off the optimizer itself: step `t` is fed
/// the `t`-th standard basis vector of `R^T`, so coordinate `t` of the
/// cumulative update is `a_t`.
pub fn extract_coefficients(spec: SolverSpec, steps: u32, eta: f64) -> Result<AccumulationVector> {
    let dim = steps as usize;
    let origin = vec![0.0; dim];
    let end = iterate(spec, steps, eta, &origin, f64::INFINITY, |t, _, out| {
        out.fill(0.0);
        out[(t - 1) as usize] = 1.0;
    })?;
    AccumulationVector::new(end.iter().map(|e| -e / eta).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Quadratic {
        target: Vec<f64>,
    }

    impl LocalObjective for Quadratic {
        fn dim(&self) -> usize {
            self.target.len()
        }
        fn gradient(&self, x: &[f64], out: &mut [f64]) {
            for ((o, xi), e) in out.iter_mut().zip(x).zip(&self.target) {
                *o = xi - e;
            }
        }
    }

    #[test]
    fn plain_sgd_is_all_ones() {
        let a = accumulation_vector(SolverSpec::PlainSgd, 3, 0.1).unwrap();
        assert_eq!(a.coeffs(), &[1.0, 1.0, 1.0]);
        assert_eq!(a.l1(), 3.0);
        assert_eq!(
            extract_coefficients(SolverSpec::PlainSgd, 2, 0.1)
                .unwrap()
                .coeffs(),
            &[1.0, 1.0]
        );
    }

    #[test]
    fn momentum_two_steps_by_hand() {
        // buffer m1 = g1, m2 = 0.3 g1 + g2; applied total m1 + m2 = 1.3 g1 + g2
        let a = accumulation_vector(SolverSpec::MomentumSgd { rho: 0.3 }, 2, 0.05).unwrap();
        assert_abs_diff_eq!(a.coeffs()[0], 1.3, epsilon = 1e-15);
        assert_abs_diff_eq!(a.coeffs()[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a.l1(), 2.3, epsilon = 1e-15);
        let e = extract_coefficients(SolverSpec::MomentumSgd { rho: 0.3 }, 2, 0.05).unwrap();
        assert_abs_diff_eq!(e.coeffs()[0], 1.3, epsilon = 1e-12);
        assert_abs_diff_eq!(e.coeffs()[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn proximal_two_steps_by_hand() {
        // x1 = -eta g1; x2 = x1 - eta (g2 + mu x1) = -eta (0.9 g1 + g2)
        let a = accumulation_vector(SolverSpec::ProximalSgd { mu: 1.0 }, 2, 0.1).unwrap();
        assert_abs_diff_eq!(a.coeffs()[0], 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(a.coeffs()[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a.l1(), 1.9, epsilon = 1e-15);
    }

    #[test]
    fn decayed_halving() {
        let e = extract_coefficients(SolverSpec::DecayedSgd { decay: 0.5 }, 3, 0.2).unwrap();
        for (got, want) in e.coeffs().iter().zip([1.0, 0.5, 0.25]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn proximal_rejects_non_contractive() {
        assert_eq!(
            accumulation_vector(SolverSpec::ProximalSgd { mu: 10.0 }, 3, 0.1),
            Err(FedError::NonContractive { product: 1.0 })
        );
    }

    #[test]
    fn constant_gradient_scales_by_l1() {
        let obj = LinearObjective {
            gradient: vec![0.5, -2.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let start = ModelVector::new(vec![1.0, 1.0]).unwrap();
        let r = run_local(
            &start,
            &obj,
            SolverSpec::PlainSgd,
            4,
            0.01,
            NoiseSpec::NONE,
            &mut rng,
        )
        .unwrap();
        assert_abs_diff_eq!(r.delta[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.delta[1], -8.0, epsilon = 1e-12);
        for spec in [
            SolverSpec::MomentumSgd { rho: 0.6 },
            SolverSpec::ProximalSgd { mu: 0.0 },
            SolverSpec::DecayedSgd { decay: 0.1 },
        ] {
            let r = run_local(&start, &obj, spec, 6, 0.01, NoiseSpec::NONE, &mut rng).unwrap();
            assert_abs_diff_eq!(r.delta[1], -2.0 * r.accum.l1(), epsilon = 1e-9);
            assert_eq!(r.steps as usize, r.accum.len());
        }
    }

    #[test]
    fn quadratic_two_steps() {
        // 0 -> 0.1 -> 0.19, delta = -0.19 / 0.1
        let obj = Quadratic { target: vec![1.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = run_local(
            &ModelVector::zeros(1),
            &obj,
            SolverSpec::PlainSgd,
            2,
            0.1,
            NoiseSpec::NONE,
            &mut rng,
        )
        .unwrap();
        assert_abs_diff_eq!(r.delta[0], -1.9, epsilon = 1e-12);
    }

    #[test]
    fn final_iterate_identity() {
        let obj = Quadratic {
            target: vec![3.0, -1.0, 0.5],
        };
        let start = ModelVector::new(vec![0.2, 0.4, -0.7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = SolverSpec::MomentumSgd { rho: 0.3 };
        let r = run_local(
            &start,
            &obj,
            spec,
            7,
            0.05,
            NoiseSpec { variance: 0.3 },
            &mut rng,
        )
        .unwrap();
        // replay the optimizer by hand with the same noise stream
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = Normal::new(0.0, (0.3f64 / 3.0).sqrt()).unwrap();
        let mut x = start.to_vec();
        let mut buf = [0.0; 3];
        for _ in 0..7 {
            for i in 0..3 {
                let g = x[i] - obj.target[i] + n.sample(&mut rng);
                buf[i] = 0.3 * buf[i] + g;
                x[i] -= 0.05 * buf[i];
            }
        }
        // noise was drawn coordinate-by-coordinate in the same order above
        for i in 0..3 {
            let rebuilt = start[i] - 0.05 * r.delta[i];
            assert!((rebuilt - x[i]).abs() <= 1e-10 * x[i].abs().max(1.0));
        }
    }

    #[test]
    fn reproducible_with_seed() {
        let obj = Quadratic {
            target: vec![1.0, 2.0],
        };
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            run_local(
                &ModelVector::zeros(2),
                &obj,
                SolverSpec::PlainSgd,
                5,
                0.1,
                NoiseSpec { variance: 1.0 },
                &mut rng,
            )
            .unwrap()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn noise_variance_matches_accumulation() {
        let obj = LinearObjective {
            gradient: vec![1.0, -1.0, 0.0, 2.0],
        };
        let spec = SolverSpec::MomentumSgd { rho: 0.3 };
        let sigma_sq = 0.8;
        let a = accumulation_vector(spec, 5, 0.01).unwrap();
        let expected: f64 = sigma_sq * a.coeffs().iter().map(|c| c * c).sum::<f64>();
        let mean: Vec<f64> = obj.gradient.iter().map(|g| g * a.l1()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10_000;
        let mut total = 0.0;
        for _ in 0..n {
            let r = run_local(
                &ModelVector::zeros(4),
                &obj,
                spec,
                5,
                0.01,
                NoiseSpec { variance: sigma_sq },
                &mut rng,
            )
            .unwrap();
            total += r
                .delta
                .iter()
                .zip(&mean)
                .map(|(d, m)| (d - m).powi(2))
                .sum::<f64>();
        }
        let empirical = total / n as f64;
        assert!(
            (empirical / expected - 1.0).abs() < 0.10,
            "{empirical} vs {expected}"
        );
    }

    #[test]
    fn blowup_is_reported() {
        let obj = Quadratic { target: vec![0.0] };
        let start = ModelVector::new(vec![1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // eta = 3 makes x_{t+1} = -2 x_t
        let err = run_local_guarded(
            &start,
            &obj,
            SolverSpec::PlainSgd,
            50,
            3.0,
            NoiseSpec::NONE,
            &mut rng,
            1e6,
        );
        assert!(matches!(err, Err(FedError::NumericalBlowup(_))));
    }
}
