//! The effective-spectral prior on the coefficient vector and the
//! inverse-Gaussian prior on the noise variance.
//!
//! The coefficient prior is a zero-mean Gaussian whose covariance is the
//! rank-k truncation of the empirical covariance, restricted to the centered
//! ball of radius R. Densities are unnormalized and use the 1/2 exponent
//! convention so that density, gradient, and sampler agree.

use nalgebra::DVector;
use rand::{Rng, RngExt};

use crate::error::{Error, Result};
use crate::spectral::LowRankCovariance;

/// Rejection-sampling budget before the truncation radius is declared
/// unworkable.
const SAMPLE_TRIAL_BUDGET: usize = 1_000_000;

/// Truncated Gaussian prior with the low-rank empirical covariance.
#[derive(Clone, Debug)]
pub struct SpectralPrior {
    low_rank: LowRankCovariance,
    radius: f64,
}

impl SpectralPrior {
    pub fn new(low_rank: LowRankCovariance, radius: f64) -> Result<Self> {
        if radius <= 0.0 || !radius.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "truncation radius must be finite and positive, got {radius}"
            )));
        }
        Ok(SpectralPrior { low_rank, radius })
    }

    /// Default radius `10 * sqrt(trace)`: large enough that the truncation is
    /// numerically inactive while the density stays proper.
    pub fn with_default_radius(low_rank: LowRankCovariance) -> Result<Self> {
        let trace = low_rank.trace();
        if trace <= 0.0 {
            return Err(Error::Config(
                "covariance trace is zero; cannot derive a truncation radius".into(),
            ));
        }
        let radius = 10.0 * trace.sqrt();
        Self::new(low_rank, radius)
    }

    pub fn dim(&self) -> usize {
        self.low_rank.dim()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn low_rank(&self) -> &LowRankCovariance {
        &self.low_rank
    }

    fn check_dim(&self, beta: &DVector<f64>) -> Result<()> {
        if beta.len() != self.dim() {
            return Err(Error::InvalidArgument(format!(
                "beta has dimension {}, prior expects {}",
                beta.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Unnormalized log density: `-1/2 beta' Sigma_{1:k}^+ beta` inside the
    /// ball, `-inf` outside.
    pub fn log_density(&self, beta: &DVector<f64>) -> Result<f64> {
        self.check_dim(beta)?;
        if beta.norm() > self.radius {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(-0.5 * self.low_rank.pinv_quadratic_form(beta))
    }

    /// Gradient of the log density, defined on the open ball only.
    pub fn grad_log_density(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(beta)?;
        if beta.norm() >= self.radius {
            return Err(Error::Domain(format!(
                "prior gradient requested at ||beta|| = {} with radius {}",
                beta.norm(),
                self.radius
            )));
        }
        Ok(-self.low_rank.pinv_apply(beta))
    }

    /// `beta' Sigma_{1:k}^+ beta` without the truncation indicator; the
    /// variational objective optimizes against this untruncated form.
    pub fn quadratic_form(&self, beta: &DVector<f64>) -> f64 {
        self.low_rank.pinv_quadratic_form(beta)
    }

    /// `Sigma_{1:k}^+ beta`.
    pub fn pinv_apply(&self, beta: &DVector<f64>) -> DVector<f64> {
        self.low_rank.pinv_apply(beta)
    }

    /// Log normalizing constant of the untruncated Gaussian on its support
    /// span (pseudo-determinant convention).
    pub fn log_normalizer_on_span(&self) -> f64 {
        let k = self.low_rank.pos_rank() as f64;
        -0.5 * k * (2.0 * std::f64::consts::PI).ln() - 0.5 * self.low_rank.log_pseudo_det()
    }

    /// Draw from the prior: a Gaussian draw in the retained span, rejected
    /// and redrawn while it falls outside the radius.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let pos_rank = self.low_rank.pos_rank();
        if pos_rank == 0 {
            return Err(Error::Config(
                "prior has no positive eigenvalues; nothing to sample".into(),
            ));
        }
        let eigenvalues = self.low_rank.eigenvalues();
        let vectors = self.low_rank.eigenvectors();
        for _ in 0..SAMPLE_TRIAL_BUDGET {
            let mut beta = DVector::zeros(self.dim());
            for (j, lambda) in eigenvalues.iter().take(pos_rank).enumerate() {
                let z: f64 = standard_normal(rng);
                beta.axpy(lambda.sqrt() * z, &vectors.column(j).into_owned(), 1.0);
            }
            if beta.norm() <= self.radius {
                return Ok(beta);
            }
        }
        Err(Error::Config(format!(
            "prior sampler accepted nothing in {SAMPLE_TRIAL_BUDGET} trials; radius {} is too small",
            self.radius
        )))
    }
}

/// Box-Muller standard normal; keeps the crate independent of distribution
/// crates and the draw sequence stable.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.random();
        if u1 > 0.0 {
            let u2: f64 = rng.random();
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Inverse-Gaussian prior on the noise variance with mean `eta` and shape
/// `xi`.
#[derive(Clone, Copy, Debug)]
pub struct VariancePrior {
    eta: f64,
    xi: f64,
}

impl VariancePrior {
    pub fn new(eta: f64, xi: f64) -> Result<Self> {
        if eta <= 0.0 || !eta.is_finite() || xi <= 0.0 || !xi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "variance prior parameters must be finite and positive, got eta={eta}, xi={xi}"
            )));
        }
        Ok(VariancePrior { eta, xi })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    /// Log density of the inverse-Gaussian distribution at `sigma2`.
    pub fn log_density(&self, sigma2: f64) -> Result<f64> {
        if sigma2 <= 0.0 || sigma2.is_nan() {
            return Err(Error::Domain(format!(
                "variance prior evaluated at non-positive sigma2 = {sigma2}"
            )));
        }
        let d = sigma2 - self.eta;
        Ok(0.5 * self.xi.ln()
            - 0.5 * (2.0 * std::f64::consts::PI).ln()
            - 1.5 * sigma2.ln()
            - self.xi * d * d / (2.0 * self.eta * self.eta * sigma2))
    }

    /// Derivative of the log density with respect to `sigma2`.
    pub fn grad_log_density(&self, sigma2: f64) -> Result<f64> {
        if sigma2 <= 0.0 || sigma2.is_nan() {
            return Err(Error::Domain(format!(
                "variance prior gradient at non-positive sigma2 = {sigma2}"
            )));
        }
        // d/ds [ (s - eta)^2 / s ] = 1 - eta^2 / s^2
        Ok(-1.5 / sigma2
            - self.xi * (1.0 - self.eta * self.eta / (sigma2 * sigma2))
                / (2.0 * self.eta * self.eta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{empirical_covariance, spectral_decompose, truncate};
    use nalgebra::DMatrix;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag_low_rank(diag: &[f64], k: usize) -> LowRankCovariance {
        let cov = crate::spectral::CovarianceMatrix::new(DMatrix::from_diagonal(
            &DVector::from_vec(diag.to_vec()),
        ))
        .unwrap();
        truncate(&spectral_decompose(&cov).unwrap(), k).unwrap()
    }

    #[test]
    fn log_density_examples() {
        let prior = SpectralPrior::new(diag_low_rank(&[2.0, 0.0], 2), 10.0).unwrap();
        let zero = DVector::from_vec(vec![0.0, 0.0]);
        assert_eq!(prior.log_density(&zero).unwrap(), 0.0);

        let beta = DVector::from_vec(vec![2.0, 0.0]);
        assert!((prior.log_density(&beta).unwrap() - (-1.0)).abs() < 1e-12);

        let outside = DVector::from_vec(vec![10.01, 0.0]);
        assert_eq!(prior.log_density(&outside).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let prior = SpectralPrior::new(diag_low_rank(&[1.0, 1.0], 2), 5.0).unwrap();
        let bad = DVector::from_vec(vec![1.0]);
        assert!(matches!(
            prior.log_density(&bad),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn gradient_examples() {
        let prior = SpectralPrior::new(diag_low_rank(&[1.0, 1.0], 2), 100.0).unwrap();
        let zero = DVector::from_vec(vec![0.0, 0.0]);
        assert_eq!(prior.grad_log_density(&zero).unwrap(), zero);

        let beta = DVector::from_vec(vec![1.0, 2.0]);
        let g = prior.grad_log_density(&beta).unwrap();
        assert!((g - DVector::from_vec(vec![-1.0, -2.0])).norm() < 1e-12);

        let boundary = DVector::from_vec(vec![100.0, 0.0]);
        assert!(matches!(
            prior.grad_log_density(&boundary),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = DMatrix::from_fn(12, 5, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let cov = empirical_covariance(&x, 24).unwrap();
        let lr = truncate(&spectral_decompose(&cov).unwrap(), 3).unwrap();
        let prior = SpectralPrior::new(lr, 50.0).unwrap();

        for _ in 0..20 {
            let beta = DVector::from_fn(5, |_, _| rng.random::<f64>() - 0.5);
            let g = prior.grad_log_density(&beta).unwrap();
            for i in 0..5 {
                let h = 1e-5;
                let mut plus = beta.clone();
                plus[i] += h;
                let mut minus = beta.clone();
                minus[i] -= h;
                let fd = (prior.log_density(&plus).unwrap() - prior.log_density(&minus).unwrap())
                    / (2.0 * h);
                let denom = fd.abs().max(1.0);
                assert!(
                    ((g[i] - fd) / denom).abs() < 1e-6,
                    "coord {i}: {} vs {fd}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn null_space_perturbation_leaves_density_unchanged() {
        // retained span = e1; discarded = e2, e3
        let prior = SpectralPrior::new(diag_low_rank(&[2.0, 1.0, 0.5], 1), 10.0).unwrap();
        let beta = DVector::from_vec(vec![1.5, 0.0, 0.0]);
        let u = DVector::from_vec(vec![0.0, 0.3, -0.4]);
        let base = prior.log_density(&beta).unwrap();
        let shifted = prior.log_density(&(&beta + &u)).unwrap();
        assert!((base - shifted).abs() < 1e-12);
    }

    #[test]
    fn samples_respect_radius_and_span() {
        let prior = SpectralPrior::new(diag_low_rank(&[2.0, 1.0, 0.0], 2), 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let s = prior.sample(&mut rng).unwrap();
            assert!(s.norm() <= 3.0 + 1e-12);
            // orthogonal to the discarded third axis
            assert!(s[2].abs() < 1e-10);
        }
    }

    #[test]
    fn sample_covariance_matches_low_rank_target() {
        // R effectively infinite: moment check against the retained covariance
        let lr = diag_low_rank(&[2.0, 1.0, 0.5], 3);
        let prior = SpectralPrior::new(lr, 1e6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = 100_000;
        let mut acc = DMatrix::zeros(3, 3);
        for _ in 0..m {
            let s = prior.sample(&mut rng).unwrap();
            acc.syger(1.0 / m as f64, &s, &s, 1.0);
        }
        acc.fill_upper_triangle_with_lower_triangle();
        for (i, expect) in [2.0, 1.0, 0.5].iter().enumerate() {
            assert!(
                (acc[(i, i)] - expect).abs() / expect < 0.05,
                "var[{i}] = {}",
                acc[(i, i)]
            );
        }
    }

    #[test]
    fn impossible_radius_reports_config_error() {
        // all prior mass has norm >= ~sqrt(lambda)*|z|; a microscopic radius
        // rejects essentially everything
        let lr = diag_low_rank(&[1.0, 1.0], 2);
        let prior = SpectralPrior::new(lr, 1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(prior.sample(&mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn variance_prior_mode_adjacent_value() {
        let vp = VariancePrior::new(1.7, 0.9).unwrap();
        let expected =
            0.5 * 0.9f64.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() - 1.5 * 1.7f64.ln();
        assert!((vp.log_density(1.7).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn variance_prior_integrates_to_one() {
        // Simpson quadrature on (0, 60] for (eta, xi) = (1, 1)
        let vp = VariancePrior::new(1.0, 1.0).unwrap();
        let a = 1e-9;
        let b = 60.0;
        let n = 600_000;
        let h = (b - a) / n as f64;
        let f = |x: f64| vp.log_density(x).unwrap().exp();
        let mut total = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            total += if i % 2 == 1 { 4.0 * f(x) } else { 2.0 * f(x) };
        }
        total *= h / 3.0;
        assert!((total - 1.0).abs() < 1e-6, "integral = {total}");
    }

    #[test]
    fn variance_prior_tails_vanish() {
        let vp = VariancePrior::new(1.0, 2.0).unwrap();
        assert!(vp.log_density(1e-8).unwrap() < -1e6);
        assert!(vp.log_density(1e8).unwrap() < -1e6);
        assert!(matches!(vp.log_density(0.0), Err(Error::Domain(_))));
        assert!(matches!(vp.log_density(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn variance_prior_gradient_matches_finite_differences() {
        let vp = VariancePrior::new(0.8, 1.3).unwrap();
        for s2 in [0.1, 0.5, 1.0, 3.0, 10.0] {
            let h = 1e-6 * s2;
            let fd =
                (vp.log_density(s2 + h).unwrap() - vp.log_density(s2 - h).unwrap()) / (2.0 * h);
            let an = vp.grad_log_density(s2).unwrap();
            assert!(
                ((an - fd) / fd.abs().max(1.0)).abs() < 1e-6,
                "s2={s2}: {an} vs {fd}"
            );
        }
    }
}
