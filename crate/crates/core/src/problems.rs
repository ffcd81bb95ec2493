//! Quadratic objective family `F_m(X) = |X - E_m|^2 / 2` with closed-form
//! true and surrogate optima. `L = 1` and `beta^2 = 1` hold exactly.

use rand_distr::{Distribution, StandardNormal};

use crate::analysis::{chi_square, surrogate_optimum_quadratic};
use crate::error::{FedError, Result};
use crate::model::ModelVector;
use crate::rng::{self, Purpose};
use crate::solvers::LocalObjective;

#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticProblem {
    targets: Vec<ModelVector>,
    /// Total gradient-noise variance per local step.
    pub sigma_sq: f64,
}

impl QuadraticProblem {
    pub fn new(targets: Vec<ModelVector>, sigma_sq: f64) -> Result<Self> {
        let Some(first) = targets.first() else {
            return Err(FedError::EmptyPopulation);
        };
        let d = first.dim();
        if d == 0 {
            return Err(FedError::WrongShape("dimension must be at least 1".into()));
        }
        if targets.iter().any(|t| t.dim() != d) {
            return Err(FedError::WrongShape("targets have mixed dimensions".into()));
        }
        if !(sigma_sq >= 0.0) || !sigma_sq.is_finite() {
            return Err(FedError::InvalidArgument(format!(
                "noise variance {sigma_sq} must be >= 0"
            )));
        }
        Ok(Self { targets, sigma_sq })
    }

    /// Targets drawn i.i.d. from `N(0, I_dim)`.
    pub fn gaussian(clients: usize, dim: usize, seed: u64, sigma_sq: f64) -> Result<Self> {
        let targets = (0..clients)
            .map(|m| {
                let mut r = rng::stream(seed, Purpose::Problem, m as u64, 0);
                ModelVector::new((0..dim).map(|_| StandardNormal.sample(&mut r)).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(targets, sigma_sq)
    }

    /// Scalar two-client instance with `E = (-e, +e)`.
    pub fn symmetric_pair(e: f64) -> Result<Self> {
        Self::new(
            vec![ModelVector::new(vec![-e])?, ModelVector::new(vec![e])?],
            0.0,
        )
    }

    pub fn targets(&self) -> &[ModelVector] {
        &self.targets
    }

    pub fn clients(&self) -> usize {
        self.targets.len()
    }

    pub fn dim(&self) -> usize {
        self.targets[0].dim()
    }

    pub fn value(&self, m: usize, x: &[f64]) -> f64 {
        0.5 * x
            .iter()
            .zip(self.targets[m].iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    }

    /// `grad F_m(X) = X - E_m`.
    pub fn grad(&self, m: usize, x: &[f64]) -> ModelVector {
        ModelVector::new(
            x.iter()
                .zip(self.targets[m].iter())
                .map(|(a, b)| a - b)
                .collect(),
        )
        .expect("finite inputs give finite gradient")
    }

    /// `sum_m w_m F_m(X)`.
    pub fn weighted_value(&self, weights: &[f64], x: &[f64]) -> f64 {
        weights
            .iter()
            .enumerate()
            .map(|(m, w)| w * self.value(m, x))
            .sum()
    }

    /// `sum_m w_m grad F_m(X)`.
    pub fn weighted_grad(&self, weights: &[f64], x: &[f64]) -> ModelVector {
        let mut g = vec![0.0; self.dim()];
        for (m, w) in weights.iter().enumerate() {
            for ((gi, xi), ei) in g.iter_mut().zip(x).zip(self.targets[m].iter()) {
                *gi += w * (xi - ei);
            }
        }
        ModelVector::new(g).expect("finite inputs give finite gradient")
    }

    /// Minimizer `sum_m w_m E_m` of `sum_m w_m F_m`.
    pub fn true_optimum(&self, weights: &[f64]) -> Result<ModelVector> {
        surrogate_optimum_quadratic(&self.targets, weights)
    }

    /// Dissimilarity constants `(beta^2, kappa^2)` under weights `w`, with
    /// `beta^2 = 1` and `kappa^2` the largest gap
    /// `sum_m w_m |grad F_m(x)|^2 - |grad F(x)|^2` over `points`.
    pub fn estimate_dissimilarity(&self, weights: &[f64], points: &[ModelVector]) -> (f64, f64) {
        let kappa_sq = points
            .iter()
            .map(|x| {
                let local: f64 = weights
                    .iter()
                    .enumerate()
                    .map(|(m, w)| w * self.grad(m, x).norm_sq())
                    .sum();
                local - self.weighted_grad(weights, x).norm_sq()
            })
            .fold(0.0, f64::max);
        (1.0, kappa_sq)
    }

    pub fn client(&self, m: usize) -> ClientObjective<'_> {
        ClientObjective {
            problem: self,
            client: m,
        }
    }
}

/// One client's local objective, borrowed from a [`QuadraticProblem`].
#[derive(Clone, Copy, Debug)]
pub struct ClientObjective<'a> {
    problem: &'a QuadraticProblem,
    client: usize,
}

impl LocalObjective for ClientObjective<'_> {
    fn dim(&self) -> usize {
        self.problem.dim()
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for ((o, xi), ei) in out
            .iter_mut()
            .zip(x)
            .zip(self.problem.targets[self.client].iter())
        {
            *o = xi - ei;
        }
    }
}

/// `(beta^2, kappa^2) = (1, 4 Omega_1 Omega_2 e^2)` for the scalar pair `E = (-e, e)`.
pub fn dissimilarity_constants_2client(omega: &[f64], e: f64) -> Result<(f64, f64)> {
    if omega.len() != 2 {
        return Err(FedError::WrongShape(format!(
            "expected 2 clients, got {}",
            omega.len()
        )));
    }
    Ok((1.0, 4.0 * omega[0] * omega[1] * e * e))
}

/// Closed-form limit of FedAvg (importance sampling, uniform weights) on the
/// scalar pair `E = (-e, e)` with plain SGD.
#[derive(Clone, Debug, PartialEq)]
pub struct AchievabilityInstance {
    pub omega: [f64; 2],
    pub surrogate_optimum: f64,
    pub chi_square: f64,
    pub kappa_sq: f64,
    /// `chi^2 kappa^2`, the limit of `|grad F(X_R)|^2`.
    pub limit_grad_sq: f64,
}

pub fn achievability_instance(
    steps: [u32; 2],
    failure: [f64; 2],
    e: f64,
) -> Result<AchievabilityInstance> {
    if steps.contains(&0) || failure.iter().any(|q| !(0.0..1.0).contains(q)) {
        return Err(FedError::InvalidArgument(format!(
            "bad instance T = {steps:?}, q = {failure:?}"
        )));
    }
    let s1 = (1.0 - failure[0]) * steps[0] as f64;
    let s2 = (1.0 - failure[1]) * steps[1] as f64;
    let omega = [s1 / (s1 + s2), s2 / (s1 + s2)];
    let surrogate_optimum = (s2 - s1) * e / (s1 + s2);
    let chi_square = (s2 - s1) * (s2 - s1) / (4.0 * s1 * s2);
    let (_, kappa_sq) = dissimilarity_constants_2client(&omega, e)?;
    Ok(AchievabilityInstance {
        omega,
        surrogate_optimum,
        chi_square,
        kappa_sq,
        limit_grad_sq: chi_square * kappa_sq,
    })
}

/// Chi-square of the two-client surrogate weights against uniform weights.
pub fn two_client_chi_square(omega: &[f64; 2]) -> f64 {
    chi_square(&[0.5, 0.5], omega)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn scalar(values: &[f64]) -> QuadraticProblem {
        QuadraticProblem::new(
            values
                .iter()
                .map(|v| ModelVector::new(vec![*v]).unwrap())
                .collect(),
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn gradient_examples() {
        let p = scalar(&[0.5, 2.0]);
        assert_eq!(p.grad(0, &[2.0]).as_slice(), &[1.5]);
        assert_eq!(p.grad(1, &[2.0]).as_slice(), &[0.0]);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = QuadraticProblem::gaussian(3, 4, 1, 0.0).unwrap();
        let x = [0.3, -1.2, 0.8, 2.0];
        let h = 1e-4;
        for m in 0..3 {
            let g = p.grad(m, &x);
            for i in 0..4 {
                let mut hi = x;
                let mut lo = x;
                hi[i] += h;
                lo[i] -= h;
                let fd = (p.value(m, &hi) - p.value(m, &lo)) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn true_optimum_examples() {
        let p = scalar(&[0.0, 1.0]);
        assert_abs_diff_eq!(p.true_optimum(&[0.5, 0.5]).unwrap()[0], 0.5);
        assert_abs_diff_eq!(p.true_optimum(&[0.0, 1.0]).unwrap()[0], 1.0);
    }

    #[test]
    fn true_optimum_matches_gradient_descent() {
        let p = QuadraticProblem::gaussian(30, 10, 4, 0.0).unwrap();
        let w = vec![1.0 / 30.0; 30];
        let mut x = vec![0.0; 10];
        for _ in 0..2000 {
            let g = p.weighted_grad(&w, &x);
            for (xi, gi) in x.iter_mut().zip(g.iter()) {
                *xi -= 0.5 * gi;
            }
        }
        let star = p.true_optimum(&w).unwrap();
        for (a, b) in x.iter().zip(star.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn pair_constants() {
        assert_eq!(
            dissimilarity_constants_2client(&[0.5, 0.5], 1.0).unwrap(),
            (1.0, 1.0)
        );
        let (b, k) = dissimilarity_constants_2client(&[1.0 / 3.0, 2.0 / 3.0], 1.0).unwrap();
        assert_eq!(b, 1.0);
        assert_abs_diff_eq!(k, 8.0 / 9.0, epsilon = 1e-15);
        assert_eq!(
            dissimilarity_constants_2client(&[0.5, 0.5], 0.0).unwrap().1,
            0.0
        );
        assert!(matches!(
            dissimilarity_constants_2client(&[1.0], 1.0),
            Err(FedError::WrongShape(_))
        ));
    }

    #[test]
    fn estimated_kappa_matches_pair_formula() {
        let p = QuadraticProblem::symmetric_pair(1.5).unwrap();
        let omega = [0.3, 0.7];
        let pts: Vec<ModelVector> = (-5..=5)
            .map(|i| ModelVector::new(vec![i as f64 * 0.4]).unwrap())
            .collect();
        let (beta_sq, kappa_sq) = p.estimate_dissimilarity(&omega, &pts);
        assert_eq!(beta_sq, 1.0);
        let (_, closed) = dissimilarity_constants_2client(&omega, 1.5).unwrap();
        assert_abs_diff_eq!(kappa_sq, closed, epsilon = 1e-12);
    }

    #[test]
    fn achievability_example() {
        let a = achievability_instance([1, 2], [0.0, 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(a.omega[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a.surrogate_optimum, 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a.chi_square, 1.0 / 8.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a.kappa_sq, 8.0 / 9.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a.limit_grad_sq, 1.0 / 9.0, epsilon = 1e-15);
        assert_abs_diff_eq!(two_client_chi_square(&a.omega), 1.0 / 8.0, epsilon = 1e-14);
        let h = achievability_instance([5, 5], [0.2, 0.2], 1.0).unwrap();
        assert_eq!(h.chi_square, 0.0);
        assert_eq!(h.limit_grad_sq, 0.0);
    }

    proptest! {
        #[test]
        fn smoothness_is_exactly_one(x in prop::collection::vec(-10.0f64..10.0, 3), y in prop::collection::vec(-10.0f64..10.0, 3)) {
            let p = QuadraticProblem::gaussian(2, 3, 0, 0.0).unwrap();
            let gx = p.grad(1, &x);
            let gy = p.grad(1, &y);
            let lhs = gx.distance(&gy);
            let rhs = ModelVector::new(x.clone()).unwrap().distance(&ModelVector::new(y.clone()).unwrap());
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
        }
    }
}
