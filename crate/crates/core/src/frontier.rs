//! The lambda grid sweep: posterior-covariance geometry per grid point,
//! the identification frontier (information deceleration against the
//! condition number), and the perpendicular-distance KNEEDLE rule that
//! picks lambda-star where marginal fragility overtakes marginal precision.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::market::fmt_f64;
use crate::policy::{CompiledWindow, UtilitySpec};
use crate::sampler::{
    calibrate_scales, lambda_seed, run_chain, summarize_chain, Calibration, CalibrationConfig,
    Chain, PosteriorSummary, PriorSpec, ProposalSpec, SamplerConfig, SamplerError,
};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Default lambda grid. Spans prior-dominated (500) through effectively
/// unregularized (100,000) posteriors.
pub const DEFAULT_LAMBDA_GRID: [f64; 13] = [
    500.0, 1000.0, 1500.0, 2000.0, 2500.0, 3000.0, 3500.0, 4500.0, 6250.0, 7500.0, 10_000.0,
    25_000.0, 100_000.0,
];

#[derive(Debug, Error)]
pub enum FrontierError {
    #[error("covariance is not symmetric within 1e-10 (max asymmetry {0:.3e})")]
    AsymmetricCovariance(f64),
    #[error("singular covariance: smallest eigenvalue {0:.3e} <= 1e-14")]
    SingularCovariance(f64),
    #[error("degenerate projection: all log-condition-number values coincide")]
    DegenerateProjection,
    #[error("frontier needs at least {min} points; got {got}")]
    TooFewPoints { min: usize, got: usize },
    #[error("flat frontier: {0} is constant across the grid")]
    FlatFrontier(&'static str),
    #[error("lambda grid must be strictly increasing and positive")]
    BadGrid,
    #[error("chain at lambda = {lambda} failed: {source}")]
    ChainFailed {
        lambda: f64,
        source: SamplerError,
    },
    #[error("chain summary at lambda = {lambda} failed: {source}")]
    SummaryFailed {
        lambda: f64,
        source: SamplerError,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// One grid point of the identification frontier.
#[derive(Debug, Clone)]
pub struct FrontierPoint {
    pub lambda: f64,
    /// Condition number of the posterior covariance, >= 1.
    pub kappa: f64,
    pub log_kappa: f64,
    /// y = -log det Sigma, the precision proxy.
    pub neg_log_det: f64,
    /// Delta = -m / kappa^2 under the global slope m.
    pub deceleration: f64,
}

/// Condition number and negative log determinant of a covariance matrix.
/// The input is symmetrized as (S + S')/2 before eigendecomposition.
pub fn covariance_geometry(sigma: &DMatrix<f64>) -> Result<(f64, f64), FrontierError> {
    let asym = (sigma - sigma.transpose()).abs().max();
    if asym > 1e-10 {
        return Err(FrontierError::AsymmetricCovariance(asym));
    }
    let sym = (sigma + sigma.transpose()) * 0.5;
    let eigen = sym.symmetric_eigen();
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut neg_log_det = 0.0;
    for &ev in eigen.eigenvalues.iter() {
        min = min.min(ev);
        max = max.max(ev);
        neg_log_det -= ev.max(f64::MIN_POSITIVE).ln();
    }
    if min <= 1e-14 {
        return Err(FrontierError::SingularCovariance(min));
    }
    Ok((max / min, neg_log_det))
}

/// Ordinary-least-squares slope of y on x over the whole grid.
pub fn frontier_slope(points: &[(f64, f64)]) -> Result<f64, FrontierError> {
    if points.len() < 2 {
        return Err(FrontierError::TooFewPoints {
            min: 2,
            got: points.len(),
        });
    }
    let n = points.len() as f64;
    let x_mean = points.iter().map(|p| p.0).sum::<f64>() / n;
    let y_mean = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - x_mean).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(FrontierError::DegenerateProjection);
    }
    let sxy: f64 = points
        .iter()
        .map(|p| (p.0 - x_mean) * (p.1 - y_mean))
        .sum();
    Ok(sxy / sxx)
}

/// Information deceleration -m / kappa^2: the approximate second derivative
/// of -log det Sigma with respect to the condition number.
pub fn information_deceleration(m: f64, kappa: f64) -> f64 {
    -m / (kappa * kappa)
}

/// The selected grid point, its score trace, and lambda-star.
#[derive(Debug, Clone)]
pub struct KneeSelection {
    pub lambda_star: f64,
    /// Zero-based index into the frontier points.
    pub index: usize,
    /// |d1 - d2| / sqrt(2) per grid point.
    pub scores: Vec<f64>,
}

/// Min-max normalizes kappa and the deceleration across the grid and
/// returns the point maximizing |d1 - d2| / sqrt(2). Ties break toward the
/// smallest lambda (more regularization).
pub fn kneedle_select(points: &[FrontierPoint]) -> Result<KneeSelection, FrontierError> {
    if points.len() < 3 {
        return Err(FrontierError::TooFewPoints {
            min: 3,
            got: points.len(),
        });
    }
    let kappa_min = points.iter().map(|p| p.kappa).fold(f64::INFINITY, f64::min);
    let kappa_max = points
        .iter()
        .map(|p| p.kappa)
        .fold(f64::NEG_INFINITY, f64::max);
    let dec_min = points
        .iter()
        .map(|p| p.deceleration)
        .fold(f64::INFINITY, f64::min);
    let dec_max = points
        .iter()
        .map(|p| p.deceleration)
        .fold(f64::NEG_INFINITY, f64::max);
    if kappa_max - kappa_min <= 0.0 {
        return Err(FrontierError::FlatFrontier("kappa"));
    }
    if dec_max - dec_min <= 0.0 {
        return Err(FrontierError::FlatFrontier("deceleration"));
    }
    // Visit points in ascending lambda so a strict comparison implements
    // the tie rule.
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].lambda.partial_cmp(&points[b].lambda).unwrap());
    let mut scores = vec![0.0; points.len()];
    let mut best = order[0];
    let mut best_score = f64::NEG_INFINITY;
    for &i in &order {
        let d1 = (points[i].kappa - kappa_min) / (kappa_max - kappa_min);
        let d2 = (points[i].deceleration - dec_min) / (dec_max - dec_min);
        let score = (d1 - d2).abs() / std::f64::consts::SQRT_2;
        scores[i] = score;
        if score > best_score {
            best_score = score;
            best = i;
        }
    }
    Ok(KneeSelection {
        lambda_star: points[best].lambda,
        index: best,
        scores,
    })
}

/// Builds frontier points from per-lambda posterior covariances: geometry
/// per point, one global slope of -log det on log kappa, then the
/// deceleration at every point.
pub fn build_frontier(
    lambdas: &[f64],
    covariances: &[DMatrix<f64>],
) -> Result<Vec<FrontierPoint>, FrontierError> {
    debug_assert_eq!(lambdas.len(), covariances.len());
    let mut geometry = Vec::with_capacity(lambdas.len());
    for sigma in covariances {
        geometry.push(covariance_geometry(sigma)?);
    }
    let xy: Vec<(f64, f64)> = geometry
        .iter()
        .map(|&(kappa, nld)| (kappa.ln(), nld))
        .collect();
    let m = frontier_slope(&xy)?;
    Ok(lambdas
        .iter()
        .zip(&geometry)
        .map(|(&lambda, &(kappa, neg_log_det))| FrontierPoint {
            lambda,
            kappa,
            log_kappa: kappa.ln(),
            neg_log_det,
            deceleration: information_deceleration(m, kappa),
        })
        .collect())
}

/// Sweep controls: chain sizes, plus optional per-lambda pilot calibration
/// of the proposal scales (frozen before each production chain).
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub sampler: SamplerConfig,
    pub calibration: Option<CalibrationConfig>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            sampler: SamplerConfig::default(),
            calibration: Some(CalibrationConfig::default()),
        }
    }
}

/// Everything a grid sweep produces: the frontier, the selection, and the
/// per-lambda chains with their summaries.
#[derive(Debug)]
pub struct SweepOutcome {
    pub points: Vec<FrontierPoint>,
    pub selection: KneeSelection,
    pub chains: Vec<Chain>,
    pub summaries: Vec<PosteriorSummary>,
    pub calibrations: Vec<Option<Calibration>>,
}

impl SweepOutcome {
    pub fn lambda_star(&self) -> f64 {
        self.selection.lambda_star
    }

    pub fn selected_chain(&self) -> &Chain {
        &self.chains[self.selection.index]
    }

    pub fn selected_summary(&self) -> &PosteriorSummary {
        &self.summaries[self.selection.index]
    }
}

// Salt distinguishing a lambda's calibration stream from its chain stream.
const CALIBRATION_SALT: u64 = 0xCA11;

/// The per-lambda unit of a sweep: optional pilot calibration with a
/// derived seed, then the production chain at seed
/// `lambda_seed(base_seed, lambda)`. Staged runs call this directly to
/// reproduce a sweep's chain bit for bit.
pub fn calibrated_chain(
    window: &CompiledWindow,
    utility: &UtilitySpec,
    lambda: f64,
    prior: &PriorSpec,
    proposal: &ProposalSpec,
    config: &SweepConfig,
    base_seed: u64,
) -> Result<(Chain, PosteriorSummary, Option<Calibration>), FrontierError> {
    let seed = lambda_seed(base_seed, lambda);
    let map_err = |source| FrontierError::ChainFailed { lambda, source };
    let (proposal, calibration) = match &config.calibration {
        Some(cal_cfg) => {
            let cal = calibrate_scales(
                window,
                utility,
                lambda,
                prior,
                proposal,
                cal_cfg,
                crate::sampler::derive_seed(seed, CALIBRATION_SALT),
            )
            .map_err(map_err)?;
            (cal.proposal.clone(), Some(cal))
        }
        None => (proposal.clone(), None),
    };
    let chain = run_chain(window, utility, lambda, prior, &proposal, &config.sampler, seed)
        .map_err(map_err)?;
    let summary =
        summarize_chain(&chain).map_err(|source| FrontierError::SummaryFailed { lambda, source })?;
    Ok((chain, summary, calibration))
}

/// Runs one chain per grid lambda (in parallel when available), assembles
/// the identification frontier from the posterior covariances, and applies
/// the KNEEDLE rule. Chain seeds derive from `(base_seed, lambda)` so the
/// outcome does not depend on scheduling.
pub fn sweep(
    window: &CompiledWindow,
    utility: &UtilitySpec,
    prior: &PriorSpec,
    proposal: &ProposalSpec,
    lambda_grid: &[f64],
    config: &SweepConfig,
    base_seed: u64,
) -> Result<SweepOutcome, FrontierError> {
    if lambda_grid.is_empty()
        || lambda_grid[0] <= 0.0
        || lambda_grid.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(FrontierError::BadGrid);
    }
    // The KNEEDLE rule needs J >= 3; fail before spending chain time.
    if lambda_grid.len() < 3 {
        return Err(FrontierError::TooFewPoints {
            min: 3,
            got: lambda_grid.len(),
        });
    }

    #[cfg(feature = "parallel")]
    let results: Result<Vec<_>, FrontierError> = lambda_grid
        .par_iter()
        .map(|&lambda| calibrated_chain(window, utility, lambda, prior, proposal, config, base_seed))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let results: Result<Vec<_>, FrontierError> = lambda_grid
        .iter()
        .map(|&lambda| calibrated_chain(window, utility, lambda, prior, proposal, config, base_seed))
        .collect();

    let mut chains = Vec::with_capacity(lambda_grid.len());
    let mut summaries = Vec::with_capacity(lambda_grid.len());
    let mut calibrations = Vec::with_capacity(lambda_grid.len());
    for (chain, summary, calibration) in results? {
        chains.push(chain);
        summaries.push(summary);
        calibrations.push(calibration);
    }
    let covariances: Vec<DMatrix<f64>> =
        summaries.iter().map(|s| s.covariance.clone()).collect();
    let points = build_frontier(lambda_grid, &covariances)?;
    let selection = kneedle_select(&points)?;
    Ok(SweepOutcome {
        points,
        selection,
        chains,
        summaries,
        calibrations,
    })
}

/// Frontier CSV: one row per grid point with the KNEEDLE score and a 0/1
/// selected flag.
pub fn write_frontier_csv(
    points: &[FrontierPoint],
    selection: &KneeSelection,
    path: &Path,
) -> Result<(), FrontierError> {
    let io_err = |source| FrontierError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    writeln!(
        out,
        "lambda,kappa,log_kappa,neg_log_det,deceleration,kneedle_score,selected"
    )
    .map_err(io_err)?;
    for (i, p) in points.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            fmt_f64(p.lambda),
            fmt_f64(p.kappa),
            fmt_f64(p.log_kappa),
            fmt_f64(p.neg_log_det),
            fmt_f64(p.deceleration),
            fmt_f64(selection.scores[i]),
            u8::from(i == selection.index)
        )
        .map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn geometry_of_reference_matrices() {
        let (kappa, nld) = covariance_geometry(&DMatrix::identity(6, 6)).unwrap();
        assert_relative_eq!(kappa, 1.0, epsilon = 1e-12);
        assert_relative_eq!(nld, 0.0, epsilon = 1e-12);

        let diag = DMatrix::from_diagonal(&DVector::from_column_slice(&[4.0, 1.0]));
        let (kappa, nld) = covariance_geometry(&diag).unwrap();
        assert_relative_eq!(kappa, 4.0, epsilon = 1e-12);
        assert_relative_eq!(nld, -(4.0f64.ln()), epsilon = 1e-12);

        let near_singular =
            DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 1e-15]));
        assert!(matches!(
            covariance_geometry(&near_singular),
            Err(FrontierError::SingularCovariance(_))
        ));
    }

    #[test]
    fn geometry_scaling_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let a = DMatrix::from_fn(4, 4, |_, _| rng.random::<f64>() - 0.5);
        let spd = &a * a.transpose() + DMatrix::identity(4, 4);
        let (kappa, nld) = covariance_geometry(&spd).unwrap();
        let c = 3.7;
        let (kappa_c, nld_c) = covariance_geometry(&(&spd * c)).unwrap();
        assert_relative_eq!(kappa, kappa_c, epsilon = 1e-9);
        assert_relative_eq!(nld_c, nld - 4.0 * c.ln(), epsilon = 1e-9);
    }

    #[test]
    fn slope_matches_normal_equations() {
        assert_relative_eq!(
            frontier_slope(&[(0.0, 0.0), (1.0, 2.0)]).unwrap(),
            2.0,
            epsilon = 1e-14
        );
        let exact: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 3.0 * i as f64 + 1.0)).collect();
        assert_relative_eq!(frontier_slope(&exact).unwrap(), 3.0, epsilon = 1e-12);

        // Noisy line against an independent normal-equations solve.
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let pts: Vec<(f64, f64)> = (0..40)
            .map(|i| {
                let x = i as f64 / 10.0;
                (x, -1.4 * x + 0.3 + 0.05 * (rng.random::<f64>() - 0.5))
            })
            .collect();
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let slope_ne = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        assert_relative_eq!(frontier_slope(&pts).unwrap(), slope_ne, epsilon = 1e-10);

        assert!(matches!(
            frontier_slope(&[(1.0, 0.0), (1.0, 2.0), (1.0, 5.0)]),
            Err(FrontierError::DegenerateProjection)
        ));
    }

    #[test]
    fn deceleration_values_and_shape() {
        assert_relative_eq!(information_deceleration(-1.0, 1.0), 1.0);
        assert_relative_eq!(information_deceleration(2.0, 2.0), -0.5);
        // With m > 0 and kappa growing along the grid, the deceleration
        // increases toward zero.
        let kappas = [1.0, 2.0, 5.0, 12.0];
        let decs: Vec<f64> = kappas
            .iter()
            .map(|&k| information_deceleration(1.5, k))
            .collect();
        assert!(decs.windows(2).all(|w| w[1] > w[0]));
    }

    fn frontier_from(kappas: &[f64], decs: &[f64]) -> Vec<FrontierPoint> {
        kappas
            .iter()
            .zip(decs)
            .enumerate()
            .map(|(i, (&kappa, &deceleration))| FrontierPoint {
                lambda: 500.0 * (i as f64 + 1.0),
                kappa,
                log_kappa: kappa.ln(),
                neg_log_det: 0.0,
                deceleration,
            })
            .collect()
    }

    #[test]
    fn kneedle_hand_example() {
        // kappa = [1, 2, 10], Delta = [0, 0.9, 1]: normalized
        // d1 = [0, 1/9, 1], d2 = [0, 0.9, 1]; the middle point wins with
        // score |1/9 - 0.9| / sqrt(2).
        let points = frontier_from(&[1.0, 2.0, 10.0], &[0.0, 0.9, 1.0]);
        let sel = kneedle_select(&points).unwrap();
        assert_eq!(sel.index, 1);
        assert_relative_eq!(sel.lambda_star, 1000.0);
        assert_relative_eq!(
            sel.scores[1],
            (1.0 / 9.0 - 0.9f64).abs() / std::f64::consts::SQRT_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn kneedle_ties_break_toward_smaller_lambda() {
        // Symmetric construction: indices 1 and 2 score identically.
        let points = frontier_from(&[1.0, 2.0, 3.0, 4.0], &[0.0, 2.0, 1.0, 3.0]);
        let sel = kneedle_select(&points).unwrap();
        let s: Vec<f64> = sel.scores.clone();
        assert_relative_eq!(s[1], s[2], epsilon = 1e-12);
        assert_eq!(sel.index, 1);
    }

    #[test]
    fn kneedle_rejects_flat_inputs() {
        let points = frontier_from(&[2.0, 2.0, 2.0], &[0.0, 0.5, 1.0]);
        assert!(matches!(
            kneedle_select(&points),
            Err(FrontierError::FlatFrontier("kappa"))
        ));
        let points = frontier_from(&[1.0, 2.0, 3.0], &[0.7, 0.7, 0.7]);
        assert!(matches!(
            kneedle_select(&points),
            Err(FrontierError::FlatFrontier("deceleration"))
        ));
        assert!(matches!(
            kneedle_select(&frontier_from(&[1.0], &[0.0])),
            Err(FrontierError::TooFewPoints { min: 3, got: 1 })
        ));
    }

    #[test]
    fn sweep_matches_closed_form_log_det_on_oracle() {
        // Quadratic oracle: Sigma(lambda) = (I + lambda gamma Q)^{-1}, so the
        // sampled -log det must track log det(I + lambda gamma Q).
        let k = 3;
        let gamma = 2.0;
        let q = DMatrix::from_diagonal(&DVector::from_column_slice(&[2e-4, 1e-4, 5e-5]));
        let utility =
            UtilitySpec::quadratic_oracle(DVector::zeros(k), q.clone(), gamma).unwrap();
        let prior = PriorSpec::standard(k);
        let window = CompiledWindow::oracle(k);
        let proposal = ProposalSpec::uniform(k, 1.5).unwrap();
        let grid = [500.0, 2500.0, 10_000.0];
        let outcome = sweep(
            &window,
            &utility,
            &prior,
            &proposal,
            &grid,
            &SweepConfig {
                sampler: SamplerConfig {
                    burn_in: 2_000,
                    keep: 20_000,
                },
                calibration: Some(CalibrationConfig {
                    pilot_sweeps: 1_000,
                    ..CalibrationConfig::default()
                }),
            },
            99,
        )
        .unwrap();
        for (point, &lambda) in outcome.points.iter().zip(&grid) {
            let expected = (DMatrix::identity(k, k) + &q * (lambda * gamma))
                .determinant()
                .ln();
            assert!(
                (point.neg_log_det - expected).abs() < 0.12,
                "lambda {lambda}: {} vs {expected}",
                point.neg_log_det
            );
        }
    }

    #[test]
    fn sweep_validates_grid() {
        let k = 2;
        let utility = UtilitySpec::quadratic_oracle(
            DVector::zeros(k),
            DMatrix::identity(k, k),
            1.0,
        )
        .unwrap();
        let prior = PriorSpec::standard(k);
        let window = CompiledWindow::oracle(k);
        let proposal = ProposalSpec::uniform(k, 1.0).unwrap();
        let cfg = SweepConfig {
            sampler: SamplerConfig {
                burn_in: 10,
                keep: 50,
            },
            calibration: None,
        };
        assert!(matches!(
            sweep(&window, &utility, &prior, &proposal, &[], &cfg, 1),
            Err(FrontierError::BadGrid)
        ));
        assert!(matches!(
            sweep(
                &window,
                &utility,
                &prior,
                &proposal,
                &[100.0, 100.0],
                &cfg,
                1
            ),
            Err(FrontierError::BadGrid)
        ));
        // A single grid value fails the KNEEDLE precondition (J >= 3).
        assert!(matches!(
            sweep(&window, &utility, &prior, &proposal, &[100.0], &cfg, 1),
            Err(FrontierError::TooFewPoints { min: 3, got: 1 })
        ));
    }

    proptest! {
        // Min-max normalization makes the selection invariant to positive
        // rescaling of either axis.
        #[test]
        fn kneedle_selection_is_scale_equivariant(
            kappa_scale in 0.01f64..100.0,
            dec_scale in 0.01f64..100.0,
        ) {
            let kappas = [1.0, 1.3, 2.2, 6.0, 14.0];
            let decs = [-2.0, -1.8, -0.9, -0.2, -0.05];
            let base = frontier_from(&kappas, &decs);
            let scaled: Vec<FrontierPoint> = base
                .iter()
                .map(|p| FrontierPoint {
                    kappa: p.kappa * kappa_scale,
                    log_kappa: (p.kappa * kappa_scale).ln(),
                    deceleration: p.deceleration * dec_scale,
                    ..p.clone()
                })
                .collect();
            let a = kneedle_select(&base).unwrap();
            let b = kneedle_select(&scaled).unwrap();
            prop_assert_eq!(a.index, b.index);
        }
    }
}
