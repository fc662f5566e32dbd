//! Closed-form Gaussian posteriors for the quadratic (mean-variance)
//! utility: exact moments, the tau = gamma * lambda reduction, entropy and
//! KL identities, and an analytic version of the identification frontier.
//! These are the verification oracles the sampler is held against.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::frontier::{build_frontier, kneedle_select, FrontierError, FrontierPoint};
use crate::policy::{PolicyError, UtilitySpec};
use crate::sampler::PriorSpec;

#[derive(Debug, Error)]
pub enum LaplaceError {
    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("lambda must be non-negative and finite; got {0}")]
    InvalidLambda(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("gamma must be positive and finite; got {0}")]
    InvalidGamma(f64),
    #[error(transparent)]
    Frontier(#[from] FrontierError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

fn check_spd(m: &DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>, LaplaceError> {
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-12 {
        return Err(LaplaceError::NotSymmetric(asym));
    }
    Cholesky::new(m.clone()).ok_or(LaplaceError::NotPositiveDefinite)
}

/// Mean-variance model in characteristic space: g is the projected mean,
/// Q the projected return covariance, theta_hat the empirical optimum.
#[derive(Debug, Clone)]
pub struct QuadraticModel {
    pub mean_gradient: DVector<f64>,
    pub return_covariance: DMatrix<f64>,
    pub gamma: f64,
    pub theta_hat: DVector<f64>,
}

impl QuadraticModel {
    pub fn new(
        mean_gradient: DVector<f64>,
        return_covariance: DMatrix<f64>,
        gamma: f64,
        theta_hat: DVector<f64>,
    ) -> Result<Self, LaplaceError> {
        let k = mean_gradient.len();
        if return_covariance.nrows() != k || theta_hat.len() != k {
            return Err(LaplaceError::DimensionMismatch {
                expected: k,
                got: return_covariance.nrows().max(theta_hat.len()),
            });
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(LaplaceError::InvalidGamma(gamma));
        }
        check_spd(&return_covariance)?;
        Ok(QuadraticModel {
            mean_gradient,
            return_covariance,
            gamma,
            theta_hat,
        })
    }

    /// Builds the model with theta_hat at the mean-variance optimum
    /// Q^{-1} g / gamma, the point where the oracle's posterior mean and
    /// the sampler's exponentiated target coincide.
    pub fn with_mv_optimum(
        mean_gradient: DVector<f64>,
        return_covariance: DMatrix<f64>,
        gamma: f64,
    ) -> Result<Self, LaplaceError> {
        let chol = check_spd(&return_covariance)?;
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(LaplaceError::InvalidGamma(gamma));
        }
        let theta_hat = chol.solve(&mean_gradient) / gamma;
        Ok(QuadraticModel {
            mean_gradient,
            return_covariance,
            gamma,
            theta_hat,
        })
    }

    /// Builds the model from a fixed expansion point: g = gamma Q theta_hat.
    /// Holding theta_hat and Q fixed while varying gamma is what makes the
    /// posterior a function of tau = gamma * lambda alone, so this is the
    /// constructor for cross-gamma comparisons.
    pub fn from_expansion_point(
        theta_hat: DVector<f64>,
        return_covariance: DMatrix<f64>,
        gamma: f64,
    ) -> Result<Self, LaplaceError> {
        check_spd(&return_covariance)?;
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(LaplaceError::InvalidGamma(gamma));
        }
        let mean_gradient = &return_covariance * &theta_hat * gamma;
        Ok(QuadraticModel {
            mean_gradient,
            return_covariance,
            gamma,
            theta_hat,
        })
    }

    pub fn k(&self) -> usize {
        self.mean_gradient.len()
    }

    /// The matching sampler target: expected utility
    /// g'theta - (gamma/2) theta'Q theta.
    pub fn utility_spec(&self) -> Result<UtilitySpec, LaplaceError> {
        Ok(UtilitySpec::quadratic_oracle(
            self.mean_gradient.clone(),
            self.return_covariance.clone(),
            self.gamma,
        )?)
    }
}

/// Exact Gaussian posterior under a quadratic expansion with curvature H:
/// Sigma = (Sigma0^{-1} + lambda H)^{-1},
/// theta_bar = Sigma (Sigma0^{-1} theta0 + lambda H theta_hat).
pub fn quadratic_posterior(
    theta_hat: &DVector<f64>,
    curvature: &DMatrix<f64>,
    prior: &PriorSpec,
    lambda: f64,
) -> Result<(DVector<f64>, DMatrix<f64>), LaplaceError> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(LaplaceError::InvalidLambda(lambda));
    }
    let k = prior.k();
    if theta_hat.len() != k || curvature.nrows() != k || curvature.ncols() != k {
        return Err(LaplaceError::DimensionMismatch {
            expected: k,
            got: theta_hat.len(),
        });
    }
    check_spd(curvature)?;
    let prior_precision = prior.precision();
    let posterior_precision = &prior_precision + curvature * lambda;
    let chol = check_spd(&posterior_precision)?;
    let sigma = chol.solve(&DMatrix::identity(k, k));
    let rhs = &prior_precision * prior.mean() + curvature * theta_hat * lambda;
    let theta_bar = chol.solve(&rhs);
    Ok((theta_bar, sigma))
}

/// The mean-variance special case H = gamma Q: both moments depend on
/// lambda and gamma only through tau = gamma * lambda.
pub fn mv_posterior(
    model: &QuadraticModel,
    lambda: f64,
    prior: &PriorSpec,
) -> Result<(DVector<f64>, DMatrix<f64>), LaplaceError> {
    let curvature = &model.return_covariance * model.gamma;
    quadratic_posterior(&model.theta_hat, &curvature, prior, lambda)
}

/// Differential entropy, entropy reduction relative to the standard-normal
/// prior, and the KL divergence from the posterior to that prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyKl {
    /// h(N(theta_bar, Sigma)) = 0.5 log((2 pi e)^K det Sigma).
    pub entropy: f64,
    /// h(prior) - h(posterior) = -0.5 log det Sigma for Sigma0 = I.
    pub entropy_reduction: f64,
    /// KL(N(theta_bar, Sigma) || N(0, I))
    ///   = 0.5 (tr Sigma + theta_bar'theta_bar - K - log det Sigma).
    pub kl: f64,
}

/// Entropy and KL identities against the standard-normal prior.
pub fn gaussian_entropy_kl(
    theta_bar: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<EntropyKl, LaplaceError> {
    let k = theta_bar.len();
    if sigma.nrows() != k || sigma.ncols() != k {
        return Err(LaplaceError::DimensionMismatch {
            expected: k,
            got: sigma.nrows(),
        });
    }
    let chol = check_spd(sigma)?;
    // log det from the Cholesky factor.
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let two_pi_e = 2.0 * std::f64::consts::PI * std::f64::consts::E;
    let entropy = 0.5 * (k as f64 * two_pi_e.ln() + log_det);
    let entropy_reduction = -0.5 * log_det;
    let kl = 0.5 * (sigma.trace() + theta_bar.norm_squared() - k as f64 - log_det);
    Ok(EntropyKl {
        entropy,
        entropy_reduction,
        kl,
    })
}

/// Posterior certainty equivalent of the mean-variance model at the
/// closed-form moments:
/// CE = g'theta_bar - (gamma/2)(theta_bar'Q theta_bar + tr(Q Sigma)).
pub fn ce_quadratic(
    model: &QuadraticModel,
    lambda: f64,
    prior: &PriorSpec,
) -> Result<f64, LaplaceError> {
    let (theta_bar, sigma) = mv_posterior(model, lambda, prior)?;
    let q = &model.return_covariance;
    let risk = theta_bar.dot(&(q * &theta_bar)) + (q * sigma).trace();
    Ok(model.mean_gradient.dot(&theta_bar) - 0.5 * model.gamma * risk)
}

/// Identification frontier computed from the closed-form covariances
/// Sigma(lambda) = (Sigma0^{-1} + lambda gamma Q)^{-1} instead of chains.
pub fn analytic_frontier(
    model: &QuadraticModel,
    prior: &PriorSpec,
    lambda_grid: &[f64],
) -> Result<Vec<FrontierPoint>, LaplaceError> {
    let mut covariances = Vec::with_capacity(lambda_grid.len());
    for &lambda in lambda_grid {
        let (_, sigma) = mv_posterior(model, lambda, prior)?;
        covariances.push(sigma);
    }
    Ok(build_frontier(lambda_grid, &covariances)?)
}

/// Outcome of the tau-star invariance check across two risk aversions.
#[derive(Debug, Clone)]
pub struct TauStarReport {
    pub gammas: (f64, f64),
    pub lambda_stars: (f64, f64),
    pub tau_stars: (f64, f64),
    pub consistent: bool,
}

/// Runs the analytic frontier for the model's gamma on `lambda_grid`, then
/// for `other_gamma` on the tau-equivalent rescaled grid, and reports
/// whether both select the same tau* = gamma * lambda*.
pub fn tau_star_check(
    model: &QuadraticModel,
    lambda_grid: &[f64],
    prior: &PriorSpec,
    other_gamma: f64,
) -> Result<TauStarReport, LaplaceError> {
    let points_a = analytic_frontier(model, prior, lambda_grid)?;
    let selection_a = kneedle_select(&points_a)?;

    let other = QuadraticModel::with_mv_optimum(
        model.mean_gradient.clone(),
        model.return_covariance.clone(),
        other_gamma,
    )?;
    let rescaled: Vec<f64> = lambda_grid
        .iter()
        .map(|l| l * model.gamma / other_gamma)
        .collect();
    let points_b = analytic_frontier(&other, prior, &rescaled)?;
    let selection_b = kneedle_select(&points_b)?;

    let tau_a = model.gamma * selection_a.lambda_star;
    let tau_b = other_gamma * selection_b.lambda_star;
    let consistent = selection_a.index == selection_b.index
        && (tau_a - tau_b).abs() <= 1e-9 * tau_a.abs().max(1.0);
    Ok(TauStarReport {
        gammas: (model.gamma, other_gamma),
        lambda_stars: (selection_a.lambda_star, selection_b.lambda_star),
        tau_stars: (tau_a, tau_b),
        consistent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_spd(k: usize, scale: f64, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(k, k, |_, _| rng.random::<f64>() - 0.5);
        (&a * a.transpose()) * scale + DMatrix::identity(k, k) * (0.1 * scale)
    }

    #[test]
    fn quadratic_posterior_reference_points() {
        let k = 3;
        let prior = PriorSpec::standard(k);
        let theta_hat = DVector::from_column_slice(&[1.0, -2.0, 0.5]);
        let identity = DMatrix::identity(k, k);

        let (mean, sigma) = quadratic_posterior(&theta_hat, &identity, &prior, 1.0).unwrap();
        for j in 0..k {
            assert_relative_eq!(mean[j], theta_hat[j] / 2.0, epsilon = 1e-12);
            assert_relative_eq!(sigma[(j, j)], 0.5, epsilon = 1e-12);
        }

        let (mean, sigma) = quadratic_posterior(&theta_hat, &identity, &prior, 0.0).unwrap();
        assert_relative_eq!(mean.norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!((sigma - &identity).abs().max(), 0.0, epsilon = 1e-12);

        let (mean, _) = quadratic_posterior(&theta_hat, &identity, &prior, 1e8).unwrap();
        assert!((mean - &theta_hat).abs().max() < 1e-6);
    }

    #[test]
    fn mv_posterior_depends_only_on_tau() {
        // Same expansion point theta_hat and Q, different gamma: posteriors
        // at equal tau = gamma * lambda coincide.
        let k = 4;
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let q = random_spd(k, 1.0, &mut rng);
        let theta_hat = DVector::from_fn(k, |i, _| 0.1 * (i as f64 + 1.0));
        let prior = PriorSpec::standard(k);
        let m_a = QuadraticModel::from_expansion_point(theta_hat.clone(), q.clone(), 3.0).unwrap();
        let m_b = QuadraticModel::from_expansion_point(theta_hat, q, 1.0).unwrap();
        let (mean_a, sigma_a) = mv_posterior(&m_a, 2.0, &prior).unwrap();
        let (mean_b, sigma_b) = mv_posterior(&m_b, 6.0, &prior).unwrap();
        assert!((mean_a - mean_b).abs().max() < 1e-12);
        assert!((sigma_a - sigma_b).abs().max() < 1e-12);
    }

    #[test]
    fn scalar_mv_posterior_hand_case() {
        let prior = PriorSpec::standard(1);
        let model = QuadraticModel::new(
            DVector::from_column_slice(&[1.0]),
            DMatrix::from_column_slice(1, 1, &[1.0]),
            1.0,
            DVector::from_column_slice(&[1.0]),
        )
        .unwrap();
        let (mean, sigma) = mv_posterior(&model, 1.0, &prior).unwrap();
        assert_relative_eq!(sigma[(0, 0)], 0.5, epsilon = 1e-14);
        assert_relative_eq!(mean[0], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn log_det_identity_holds_analytically() {
        // -log det Sigma(lambda, gamma) = log det(I + lambda gamma Q).
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for trial in 0..20 {
            let k = 2 + (trial % 5);
            let q = random_spd(k, 10f64.powi((trial % 3) as i32 - 2), &mut rng);
            let gamma = 0.5 + rng.random::<f64>() * 5.0;
            let lambda = 10f64.powf(rng.random::<f64>() * 4.0);
            let model = QuadraticModel::with_mv_optimum(DVector::zeros(k), q.clone(), gamma)
                .unwrap();
            let prior = PriorSpec::standard(k);
            let (_, sigma) = mv_posterior(&model, lambda, &prior).unwrap();
            let neg_log_det = -sigma
                .cholesky()
                .unwrap()
                .l()
                .diagonal()
                .iter()
                .map(|d| 2.0 * d.ln())
                .sum::<f64>();
            let rhs = (DMatrix::identity(k, k) + &q * (lambda * gamma))
                .cholesky()
                .unwrap()
                .l()
                .diagonal()
                .iter()
                .map(|d| 2.0 * d.ln())
                .sum::<f64>();
            assert!(
                (neg_log_det - rhs).abs() <= 1e-10 * rhs.abs().max(1.0),
                "trial {trial}: {neg_log_det} vs {rhs}"
            );
        }
    }

    #[test]
    fn entropy_and_kl_reference_points() {
        let k = 3;
        let at_prior =
            gaussian_entropy_kl(&DVector::zeros(k), &DMatrix::identity(k, k)).unwrap();
        assert_relative_eq!(at_prior.kl, 0.0, epsilon = 1e-12);
        assert_relative_eq!(at_prior.entropy_reduction, 0.0, epsilon = 1e-12);

        // K = 1, Sigma = 0.5, mean 0: KL = (0.5 - 1 - ln 0.5) / 2.
        let r = gaussian_entropy_kl(
            &DVector::zeros(1),
            &DMatrix::from_column_slice(1, 1, &[0.5]),
        )
        .unwrap();
        assert_relative_eq!(r.kl, 0.5 * (0.5 - 1.0 - 0.5f64.ln()), epsilon = 1e-12);
        assert_relative_eq!(r.kl, 0.096573590279973, epsilon = 1e-12);

        // Determinant scaling: entropy(c I) - entropy(I) = (K/2) ln c.
        let c = 2.7;
        let e1 = gaussian_entropy_kl(&DVector::zeros(k), &(DMatrix::identity(k, k) * c))
            .unwrap()
            .entropy;
        let e0 = gaussian_entropy_kl(&DVector::zeros(k), &DMatrix::identity(k, k))
            .unwrap()
            .entropy;
        assert_relative_eq!(e1 - e0, k as f64 / 2.0 * c.ln(), epsilon = 1e-12);
    }

    #[test]
    fn ce_quadratic_reference_points() {
        let k = 2;
        let prior = PriorSpec::standard(k);
        let q = DMatrix::identity(k, k);

        // g = 0: pure risk term, strictly negative.
        let model = QuadraticModel::with_mv_optimum(DVector::zeros(k), q.clone(), 2.0).unwrap();
        let ce = ce_quadratic(&model, 3.0, &prior).unwrap();
        let (_, sigma) = mv_posterior(&model, 3.0, &prior).unwrap();
        assert_relative_eq!(ce, -1.0 * (q.clone() * sigma).trace(), epsilon = 1e-12);
        assert!(ce < 0.0);

        // lambda = 0 keeps the prior moments.
        let ce0 = ce_quadratic(&model, 0.0, &prior).unwrap();
        assert_relative_eq!(ce0, -1.0 * k as f64, epsilon = 1e-12);

        // K = 1 hand case: g = 1, Q = 1, gamma = 1, lambda = 1, theta_hat = 1.
        let hand = QuadraticModel::new(
            DVector::from_column_slice(&[1.0]),
            DMatrix::from_column_slice(1, 1, &[1.0]),
            1.0,
            DVector::from_column_slice(&[1.0]),
        )
        .unwrap();
        let ce = ce_quadratic(&hand, 1.0, &PriorSpec::standard(1)).unwrap();
        assert_relative_eq!(ce, 0.125, epsilon = 1e-12);
    }

    #[test]
    fn tau_star_is_invariant_across_gamma() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let grid: Vec<f64> = crate::frontier::DEFAULT_LAMBDA_GRID.to_vec();
        for trial in 0..10 {
            let k = 3 + (trial % 4);
            let q = random_spd(k, 10f64.powi(-((trial % 4) as i32)), &mut rng);
            let g = DVector::from_fn(k, |i, _| 0.02 * (i as f64 + 1.0));
            let model = QuadraticModel::with_mv_optimum(g, q, 2.0).unwrap();
            let prior = PriorSpec::standard(k);
            let report = tau_star_check(&model, &grid, &prior, 4.0).unwrap();
            assert!(report.consistent, "trial {trial}: {report:?}");
            assert_relative_eq!(
                report.tau_stars.0,
                report.tau_stars.1,
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn tau_star_check_degenerate_same_gamma() {
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let q = random_spd(3, 0.01, &mut rng);
        let model =
            QuadraticModel::with_mv_optimum(DVector::zeros(3), q, 1.0).unwrap();
        let prior = PriorSpec::standard(3);
        let grid = [500.0, 1000.0, 2500.0, 10_000.0];
        let report = tau_star_check(&model, &grid, &prior, 1.0).unwrap();
        assert!(report.consistent);
        assert_relative_eq!(report.lambda_stars.0, report.lambda_stars.1);
    }

    #[test]
    fn kl_is_nondecreasing_in_lambda_with_centered_prior() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let k = 4;
        let q = random_spd(k, 1e-3, &mut rng);
        let g = DVector::from_fn(k, |i, _| 0.01 * (i as f64 + 1.0));
        let model = QuadraticModel::with_mv_optimum(g, q, 3.0).unwrap();
        let prior = PriorSpec::standard(k);
        let mut last = f64::NEG_INFINITY;
        for &lambda in crate::frontier::DEFAULT_LAMBDA_GRID.iter() {
            let (mean, sigma) = mv_posterior(&model, lambda, &prior).unwrap();
            let kl = gaussian_entropy_kl(&mean, &sigma).unwrap().kl;
            assert!(kl >= last - 1e-12, "KL fell from {last} to {kl} at {lambda}");
            last = kl;
        }
    }

    #[test]
    fn non_spd_matrices_are_rejected()
    {
        let prior = PriorSpec::standard(2);
        let not_spd = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            quadratic_posterior(&DVector::zeros(2), &not_spd, &prior, 1.0),
            Err(LaplaceError::NotPositiveDefinite)
        ));
        assert!(gaussian_entropy_kl(&DVector::zeros(2), &not_spd).is_err());
    }
}
