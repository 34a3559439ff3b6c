//! Full-covariance CMA-ES with cumulative step-size adaptation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CmaError {
    #[error("invalid dimensions: dim {dim}, lambda {lambda}")]
    InvalidDims { dim: usize, lambda: usize },
    #[error("initial step size must be positive and finite, got {0}")]
    InvalidSigma(f64),
    #[error("covariance decomposition failed (smallest eigenvalue {0})")]
    Decomposition(f64),
    #[error("fitness {index} is NaN")]
    NanFitness { index: usize },
    #[error("expected {expected} fitness values, got {got}")]
    FitnessCount { expected: usize, got: usize },
    #[error("tell called without a preceding ask")]
    NoPopulation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Goal {
    Minimize,
    Maximize,
}

/// Strategy constants; `standard` gives the usual defaults for (n, λ).
#[derive(Clone, Debug, PartialEq)]
pub struct CmaConstants {
    pub lambda: usize,
    pub mu: usize,
    pub weights: Vec<f64>,
    pub mu_eff: f64,
    pub c_sigma: f64,
    pub d_sigma: f64,
    pub c_c: f64,
    pub c1: f64,
    pub c_mu: f64,
    /// E‖N(0, I)‖.
    pub chi_n: f64,
    /// Generations between eigendecompositions.
    pub eigen_interval: u64,
}

impl CmaConstants {
    pub fn standard(dim: usize, lambda: usize) -> Result<Self, CmaError> {
        if dim == 0 || lambda < 2 {
            return Err(CmaError::InvalidDims { dim, lambda });
        }
        let n = dim as f64;
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu).map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - (i as f64).ln()).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff));
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
        Ok(CmaConstants {
            lambda,
            mu,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c1,
            c_mu,
            chi_n,
            eigen_interval: eigen_interval(dim, c1, c_mu),
        })
    }
}

fn eigen_interval(dim: usize, c1: f64, c_mu: f64) -> u64 {
    let gap = 1.0 / (10.0 * dim as f64 * (c1 + c_mu));
    if gap.is_finite() {
        (gap.ceil() as u64).max(1)
    } else {
        u64::MAX
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmaState {
    mean: DVector<f64>,
    sigma: f64,
    cov: DMatrix<f64>,
    p_sigma: DVector<f64>,
    p_c: DVector<f64>,
    basis: DMatrix<f64>,
    /// Square roots of the eigenvalues of `cov`, aligned with `basis`.
    scales: DVector<f64>,
    eigen_generation: u64,
    generation: u64,
    constants: CmaConstants,
    population: Option<Vec<DVector<f64>>>,
}

impl CmaState {
    pub fn new(mean: Vec<f64>, lambda: usize, sigma0: f64) -> Result<Self, CmaError> {
        let constants = CmaConstants::standard(mean.len(), lambda)?;
        Self::with_constants(mean, sigma0, constants)
    }

    pub fn with_constants(mean: Vec<f64>, sigma0: f64, constants: CmaConstants) -> Result<Self, CmaError> {
        let n = mean.len();
        if n == 0 || constants.lambda < 2 || constants.weights.is_empty() || constants.weights.len() > constants.lambda {
            return Err(CmaError::InvalidDims {
                dim: n,
                lambda: constants.lambda,
            });
        }
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(CmaError::InvalidSigma(sigma0));
        }
        Ok(CmaState {
            mean: DVector::from_vec(mean),
            sigma: sigma0,
            cov: DMatrix::identity(n, n),
            p_sigma: DVector::zeros(n),
            p_c: DVector::zeros(n),
            basis: DMatrix::identity(n, n),
            scales: DVector::from_element(n, 1.0),
            eigen_generation: 0,
            generation: 0,
            constants,
            population: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn p_sigma(&self) -> &[f64] {
        self.p_sigma.as_slice()
    }

    pub fn p_c(&self) -> &[f64] {
        self.p_c.as_slice()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn constants(&self) -> &CmaConstants {
        &self.constants
    }

    fn refresh_eigen(&mut self) -> Result<(), CmaError> {
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        let floor = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if !(floor > 0.0 && floor.is_finite()) {
            return Err(CmaError::Decomposition(floor));
        }
        self.cov = sym;
        self.scales = eig.eigenvalues.map(f64::sqrt);
        self.basis = eig.eigenvectors;
        self.eigen_generation = self.generation;
        Ok(())
    }

    /// Sample λ candidates around the mean.
    pub fn ask(&mut self, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>, CmaError> {
        if self.generation > 0 && self.generation - self.eigen_generation >= self.constants.eigen_interval {
            let before = self.clone();
            if let Err(e) = self.refresh_eigen() {
                *self = before;
                return Err(e);
            }
        }
        let n = self.dim();
        let population: Vec<DVector<f64>> = (0..self.constants.lambda)
            .map(|_| {
                let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let y = &self.basis * z.component_mul(&self.scales);
                &self.mean + y * self.sigma
            })
            .collect();
        let out = population.iter().map(|x| x.as_slice().to_vec()).collect();
        self.population = Some(population);
        Ok(out)
    }

    /// Rank the last population by fitness and update the distribution.
    pub fn tell(&mut self, fitnesses: &[f64], goal: Goal) -> Result<(), CmaError> {
        let population = self.population.as_ref().ok_or(CmaError::NoPopulation)?;
        if fitnesses.len() != population.len() {
            return Err(CmaError::FitnessCount {
                expected: population.len(),
                got: fitnesses.len(),
            });
        }
        if let Some(index) = fitnesses.iter().position(|f| f.is_nan()) {
            return Err(CmaError::NanFitness { index });
        }
        let mut order: Vec<usize> = (0..fitnesses.len()).collect();
        order.sort_by(|&a, &b| match goal {
            Goal::Minimize => fitnesses[a].total_cmp(&fitnesses[b]),
            Goal::Maximize => fitnesses[b].total_cmp(&fitnesses[a]),
        });
        let population = self.population.take().unwrap();
        let k = &self.constants;
        let n = self.dim() as f64;

        let old_mean = self.mean.clone();
        let mut mean = DVector::zeros(self.dim());
        for (w, &i) in k.weights.iter().zip(&order) {
            mean.axpy(*w, &population[i], 1.0);
        }
        let y_w = (&mean - &old_mean) / self.sigma;

        // C^(-1/2) y_w through the cached eigenbasis
        let inv_sqrt_y = &self.basis * (self.basis.tr_mul(&y_w)).component_div(&self.scales);
        self.p_sigma = &self.p_sigma * (1.0 - k.c_sigma) + inv_sqrt_y * (k.c_sigma * (2.0 - k.c_sigma) * k.mu_eff).sqrt();
        let ps_norm = self.p_sigma.norm();
        let decay = 1.0 - (1.0 - k.c_sigma).powi(2 * (self.generation as i32 + 1));
        let h_sigma = if ps_norm / decay.sqrt() < (1.4 + 2.0 / (n + 1.0)) * k.chi_n {
            1.0
        } else {
            0.0
        };
        self.p_c = &self.p_c * (1.0 - k.c_c) + &y_w * (h_sigma * (k.c_c * (2.0 - k.c_c) * k.mu_eff).sqrt());

        let mut rank_mu = DMatrix::zeros(self.dim(), self.dim());
        for (w, &i) in k.weights.iter().zip(&order) {
            let y = (&population[i] - &old_mean) / self.sigma;
            rank_mu.ger(*w, &y, &y, 1.0);
        }
        let keep = 1.0 - k.c1 - k.c_mu + (1.0 - h_sigma) * k.c1 * k.c_c * (2.0 - k.c_c);
        let mut cov = &self.cov * keep + rank_mu * k.c_mu;
        cov.ger(k.c1, &self.p_c, &self.p_c, 1.0);
        self.cov = (&cov + cov.transpose()) * 0.5;

        self.sigma *= ((k.c_sigma / k.d_sigma) * (ps_norm / k.chi_n - 1.0)).exp();
        self.mean = mean;
        self.generation += 1;
        Ok(())
    }

    /// Smallest eigenvalue of the current covariance, computed afresh.
    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.cov.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_symmetric(&self) -> bool {
        self.cov == self.cov.transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn sphere(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    fn start(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, 0, 7);
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn init_state() {
        let s = CmaState::new(vec![0.5; 4], 10, 1.0).unwrap();
        assert_eq!(s.covariance(), &DMatrix::identity(4, 4));
        assert!(s.p_sigma().iter().chain(s.p_c()).all(|&v| v == 0.0));
        let k = s.constants();
        assert_eq!(k.mu, 5);
        assert!((k.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(k.weights.windows(2).all(|w| w[0] >= w[1]));
        assert!(CmaState::new(vec![], 10, 1.0).is_err());
        assert!(CmaState::new(vec![0.0], 1, 1.0).is_err());
        assert!(CmaState::new(vec![0.0], 4, 0.0).is_err());
    }

    #[test]
    fn standard_constants_by_formula() {
        // independent recomputation for n = 10, λ = 35
        let k = CmaConstants::standard(10, 35).unwrap();
        assert_eq!(k.mu, 17);
        let raw: Vec<f64> = (1..=17).map(|i| (18.0f64 / i as f64).ln()).collect();
        let total: f64 = raw.iter().sum();
        for (w, r) in k.weights.iter().zip(&raw) {
            assert!((w - r / total).abs() < 1e-15);
        }
        let mu_eff = total * total / raw.iter().map(|r| r * r).sum::<f64>();
        assert!((k.mu_eff - mu_eff).abs() < 1e-12);
        assert!((k.c_sigma - (mu_eff + 2.0) / (15.0 + mu_eff)).abs() < 1e-15);
        assert!((k.c1 - 2.0 / (11.3f64.powi(2) + mu_eff)).abs() < 1e-15);
        assert!((k.chi_n - 10f64.sqrt() * (1.0 - 0.025 + 1.0 / 2100.0)).abs() < 1e-15);
        assert_eq!(k.eigen_interval, 1);
        let big = CmaConstants::standard(34_923, 35).unwrap();
        assert!(big.eigen_interval > 1);
    }

    #[test]
    fn tiny_sigma_samples_the_mean() {
        let mut s = CmaState::new(vec![1.0, -2.0, 3.0], 6, 1e-300).unwrap();
        for x in s.ask(&mut stream(1, 0, 0)).unwrap() {
            assert_eq!(x, vec![1.0, -2.0, 3.0]);
        }
    }

    #[test]
    fn ask_is_deterministic() {
        let s = CmaState::new(vec![0.0; 5], 8, 1.0).unwrap();
        let a = s.clone().ask(&mut stream(3, 0, 0)).unwrap();
        let b = s.clone().ask(&mut stream(3, 0, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_samples_are_normal() {
        let sigma = 0.7;
        let mut s = CmaState::new(vec![0.0; 3], 10_000, sigma).unwrap();
        let xs = s.ask(&mut stream(9, 0, 0)).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = xs.iter().map(|x| x[c]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            assert!(m.abs() < 0.05, "{m}");
            assert!((0.9 * sigma * sigma..=1.1 * sigma * sigma).contains(&v), "{v}");
        }
    }

    #[test]
    fn tell_checks_inputs() {
        let mut s = CmaState::new(vec![0.0; 2], 4, 1.0).unwrap();
        assert_eq!(s.tell(&[0.0; 4], Goal::Minimize), Err(CmaError::NoPopulation));
        s.ask(&mut stream(0, 0, 0)).unwrap();
        assert!(matches!(s.tell(&[0.0; 3], Goal::Minimize), Err(CmaError::FitnessCount { .. })));
        assert_eq!(s.tell(&[0.0, f64::NAN, 1.0, 2.0], Goal::Minimize), Err(CmaError::NanFitness { index: 1 }));
        // a failed tell leaves the population in place
        assert!(s.tell(&[0.0, 3.0, 1.0, 2.0], Goal::Minimize).is_ok());
    }

    #[test]
    fn sphere_converges() {
        let mut s = CmaState::new(start(10, 1), 35, 1.0).unwrap();
        let mut rng = stream(1, 0, 0);
        let mut best = f64::INFINITY;
        for _ in 0..300 {
            let xs = s.ask(&mut rng).unwrap();
            let f: Vec<f64> = xs.iter().map(|x| sphere(x)).collect();
            best = f.iter().copied().fold(best, f64::min);
            s.tell(&f, Goal::Minimize).unwrap();
            assert!(s.is_symmetric());
            assert!(s.min_eigenvalue() > 0.0 && s.sigma() > 0.0);
            if best < 1e-10 {
                break;
            }
        }
        assert!(best < 1e-10, "{best}");
    }

    #[test]
    fn maximize_is_rank_reversal() {
        let mut a = CmaState::new(start(4, 2), 8, 1.0).unwrap();
        let mut b = a.clone();
        let mut ra = stream(4, 0, 0);
        let mut rb = stream(4, 0, 0);
        for _ in 0..10 {
            let xs = a.ask(&mut ra).unwrap();
            b.ask(&mut rb).unwrap();
            let f: Vec<f64> = xs.iter().map(|x| sphere(x)).collect();
            let neg: Vec<f64> = f.iter().map(|v| -v).collect();
            a.tell(&f, Goal::Minimize).unwrap();
            b.tell(&neg, Goal::Maximize).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn single_parent_without_covariance_learning_jumps_to_best() {
        let mut k = CmaConstants::standard(3, 6).unwrap();
        k.mu = 1;
        k.weights = vec![1.0];
        k.c1 = 0.0;
        k.c_mu = 0.0;
        k.eigen_interval = u64::MAX;
        let mut s = CmaState::with_constants(vec![0.3, -0.1, 2.0], 0.5, k).unwrap();
        let mut rng = stream(6, 0, 0);
        for _ in 0..5 {
            let xs = s.ask(&mut rng).unwrap();
            let f: Vec<f64> = xs.iter().map(|x| sphere(x)).collect();
            let best = (0..xs.len()).min_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
            s.tell(&f, Goal::Minimize).unwrap();
            assert_eq!(s.mean(), xs[best].as_slice());
            assert_eq!(s.covariance(), &DMatrix::identity(3, 3));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn monotone_transform_gives_identical_state(seed in any::<u64>(), a in 0.5f64..4.0, b in -3.0f64..3.0) {
            let mut s1 = CmaState::new(start(5, seed), 10, 1.0).unwrap();
            let mut s2 = s1.clone();
            let mut r1 = stream(seed, 0, 0);
            let mut r2 = stream(seed, 0, 0);
            for _ in 0..8 {
                let xs = s1.ask(&mut r1).unwrap();
                prop_assert_eq!(&xs, &s2.ask(&mut r2).unwrap());
                let f: Vec<f64> = xs.iter().map(|x| sphere(x)).collect();
                let g: Vec<f64> = f.iter().map(|v| a * v + b).collect();
                // the affine map can merge nearby values in floating point
                let order = |v: &[f64]| {
                    let mut o: Vec<usize> = (0..v.len()).collect();
                    o.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
                    o
                };
                prop_assume!(order(&f) == order(&g));
                prop_assume!(g.windows(2).all(|w| w[0] != w[1]));
                s1.tell(&f, Goal::Minimize).unwrap();
                s2.tell(&g, Goal::Minimize).unwrap();
                prop_assert_eq!(&s1, &s2);
                prop_assert!(s1.is_symmetric());
                prop_assert!(s1.min_eigenvalue() > 0.0);
                prop_assert!(s1.sigma() > 0.0);
            }
        }

        #[test]
        fn covariance_stays_positive_definite(seed in any::<u64>(), n in 1usize..8, lambda in 2usize..20) {
            let mut s = CmaState::new(start(n, seed), lambda, 1.0).unwrap();
            let mut rng = stream(seed, 0, 1);
            for _ in 0..30 {
                let xs = s.ask(&mut rng).unwrap();
                // a rugged objective: sphere plus a ripple
                let f: Vec<f64> = xs.iter().map(|x| sphere(x) + (5.0 * x[0]).sin()).collect();
                s.tell(&f, Goal::Minimize).unwrap();
                prop_assert!(s.is_symmetric());
                prop_assert!(s.min_eigenvalue() > 0.0);
                prop_assert!(s.sigma() > 0.0 && s.sigma().is_finite());
            }
        }
    }
}
