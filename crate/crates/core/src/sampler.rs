//! Metropolis-within-Gibbs sampling of the Gibbs posterior
//! p_lambda(theta | data) proportional to exp(lambda * U(data, theta)) * pi(theta),
//! with symmetric stable proposals drawn coordinate by coordinate.
//!
//! The kernel is deliberately non-adaptive: proposal scales are frozen
//! before a production chain starts so the chain stays Markovian. The
//! pilot-based `calibrate_scales` exists to pick those frozen scales.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::fmt_f64;
use crate::policy::{CompiledWindow, Theta, UtilitySpec, NEG_INFINITY_UTILITY};
use crate::stable::draw_stable;
use crate::stats::quantile_sorted;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("prior covariance is not symmetric (max asymmetry {0:.3e})")]
    PriorNotSymmetric(f64),
    #[error("prior covariance is not positive definite (Cholesky failed)")]
    PriorNotPositiveDefinite,
    #[error("proposal alpha must lie in (1, 2]; got {0}")]
    InvalidAlpha(f64),
    #[error("proposal scales must be positive; scale[{index}] = {value}")]
    InvalidScale { index: usize, value: f64 },
    #[error("dimension mismatch: {what} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("lambda must be non-negative and finite; got {0}")]
    InvalidLambda(f64),
    #[error("chain must keep at least one draw")]
    EmptyChain,
    #[error("log and power utilities need a nonempty window")]
    ScalarUtilityNeedsData,
    #[error("initial state has utility -inf; the sampler cannot start from {0:?}")]
    InfeasibleStart(Vec<f64>),
    #[error("chain summary needs at least two draws; got {0}")]
    TooFewDraws(usize),
    #[error("calibration band must satisfy 0 < low < high < 1; got [{0}, {1}]")]
    InvalidBand(f64, f64),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed chain file {path}: {detail}")]
    MalformedChainFile { path: String, detail: String },
}

/// Gaussian prior N(theta0, Sigma0) on the tilt coefficients. The default
/// is theta0 = 0, Sigma0 = I.
#[derive(Debug, Clone)]
pub struct PriorSpec {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl PriorSpec {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self, SamplerError> {
        let k = mean.len();
        if covariance.nrows() != k || covariance.ncols() != k {
            return Err(SamplerError::DimensionMismatch {
                what: "prior covariance",
                got: covariance.nrows(),
                expected: k,
            });
        }
        let asym = (&covariance - covariance.transpose()).abs().max();
        if asym > 1e-12 {
            return Err(SamplerError::PriorNotSymmetric(asym));
        }
        let chol = Cholesky::new(covariance.clone())
            .ok_or(SamplerError::PriorNotPositiveDefinite)?;
        Ok(PriorSpec {
            mean,
            covariance,
            chol,
        })
    }

    /// N(0, I_k).
    pub fn standard(k: usize) -> Self {
        PriorSpec::new(DVector::zeros(k), DMatrix::identity(k, k))
            .expect("identity covariance is SPD")
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn k(&self) -> usize {
        self.mean.len()
    }

    /// (theta - theta0)' Sigma0^{-1} (theta - theta0), via the cached
    /// Cholesky factor.
    pub fn quadratic_form(&self, theta: &DVector<f64>) -> f64 {
        let d = theta - &self.mean;
        d.dot(&self.chol.solve(&d))
    }

    /// Sigma0^{-1}, solved column by column from the Cholesky factor.
    pub fn precision(&self) -> DMatrix<f64> {
        let k = self.k();
        self.chol.solve(&DMatrix::identity(k, k))
    }
}

/// Default stability exponent of the proposal density.
pub const DEFAULT_PROPOSAL_ALPHA: f64 = 1.75;

/// Symmetric stable proposal: one scale per coordinate, common exponent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProposalSpec {
    pub alpha: f64,
    pub scales: Vec<f64>,
}

impl ProposalSpec {
    pub fn new(alpha: f64, scales: Vec<f64>) -> Result<Self, SamplerError> {
        if !(alpha > 1.0 && alpha <= 2.0) {
            return Err(SamplerError::InvalidAlpha(alpha));
        }
        for (index, &value) in scales.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(SamplerError::InvalidScale { index, value });
            }
        }
        Ok(ProposalSpec { alpha, scales })
    }

    /// Same scale on every coordinate at the default exponent.
    pub fn uniform(k: usize, scale: f64) -> Result<Self, SamplerError> {
        ProposalSpec::new(DEFAULT_PROPOSAL_ALPHA, vec![scale; k])
    }

    pub fn k(&self) -> usize {
        self.scales.len()
    }
}

/// Desk-scale chain sizes. Full-scale runs configure these upward.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub burn_in: usize,
    pub keep: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            burn_in: 20_000,
            keep: 50_000,
        }
    }
}

/// Post burn-in draws of theta recorded once per full coordinate sweep,
/// with per-coordinate acceptance bookkeeping.
#[derive(Debug, Clone)]
pub struct Chain {
    pub lambda: f64,
    /// keep x K; row d is the state after sweep burn_in + d.
    pub draws: DMatrix<f64>,
    pub burn_in: usize,
    pub accept_counts: Vec<u64>,
    pub proposal_counts: Vec<u64>,
    pub seed: u64,
    pub utility_id: String,
    pub window_id: String,
}

impl Chain {
    pub fn k(&self) -> usize {
        self.draws.ncols()
    }

    pub fn len(&self) -> usize {
        self.draws.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.nrows() == 0
    }

    /// One coordinate's draws as a contiguous series.
    pub fn coordinate(&self, j: usize) -> Vec<f64> {
        self.draws.column(j).iter().cloned().collect()
    }
}

/// Splitmix64 mix of a base seed and a salt; used to give every chain in a
/// sweep an independent, reproducible stream.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the chain at a given lambda, derived from the run's base seed.
pub fn lambda_seed(base: u64, lambda: f64) -> u64 {
    derive_seed(base, lambda.to_bits())
}

struct StepContext<'a> {
    window: &'a CompiledWindow,
    utility: &'a UtilitySpec,
    lambda: f64,
    prior: &'a PriorSpec,
    proposal: &'a ProposalSpec,
}

/// One Metropolis update of coordinate j. Mutates theta in place on
/// acceptance; keeps the cached utility and prior quadratic form current.
fn step_coordinate<R: Rng + ?Sized>(
    ctx: &StepContext<'_>,
    theta: &mut DVector<f64>,
    j: usize,
    current_utility: &mut f64,
    current_prior_qf: &mut f64,
    rng: &mut R,
) -> bool {
    let old = theta[j];
    theta[j] = draw_stable(ctx.proposal.alpha, ctx.proposal.scales[j], old, rng);
    let proposed_utility = ctx.window.expected_utility(theta, ctx.utility);
    if proposed_utility == NEG_INFINITY_UTILITY {
        theta[j] = old;
        return false;
    }
    let proposed_qf = ctx.prior.quadratic_form(theta);
    let log_rho = ctx.lambda * (proposed_utility - *current_utility)
        - 0.5 * (proposed_qf - *current_prior_qf);
    let log_u = rng.random::<f64>().clamp(1e-300, 1.0 - 1e-16).ln();
    if log_u < log_rho {
        *current_utility = proposed_utility;
        *current_prior_qf = proposed_qf;
        true
    } else {
        theta[j] = old;
        false
    }
}

/// The coordinate update as a standalone operation: propose for coordinate
/// j, apply the symmetric-proposal acceptance ratio
/// rho = exp(lambda (U_p - U) - (prior quadratic-form difference) / 2),
/// and return the (possibly unchanged) state plus the acceptance flag.
#[allow(clippy::too_many_arguments)]
pub fn coordinate_step<R: Rng + ?Sized>(
    state: &Theta,
    j: usize,
    window: &CompiledWindow,
    utility: &UtilitySpec,
    lambda: f64,
    prior: &PriorSpec,
    proposal: &ProposalSpec,
    rng: &mut R,
) -> Result<(Theta, bool), SamplerError> {
    let k = prior.k();
    if j >= k {
        return Err(SamplerError::DimensionMismatch {
            what: "coordinate index",
            got: j,
            expected: k,
        });
    }
    check_dimensions(window, utility, prior, proposal)?;
    let mut theta = state.coefficients().clone();
    let mut current_utility = window.expected_utility(&theta, utility);
    if current_utility == NEG_INFINITY_UTILITY {
        return Err(SamplerError::InfeasibleStart(theta.iter().cloned().collect()));
    }
    let mut current_qf = prior.quadratic_form(&theta);
    let ctx = StepContext {
        window,
        utility,
        lambda,
        prior,
        proposal,
    };
    let accepted = step_coordinate(&ctx, &mut theta, j, &mut current_utility, &mut current_qf, rng);
    Ok((Theta::new(theta).expect("finite state"), accepted))
}

fn check_dimensions(
    window: &CompiledWindow,
    utility: &UtilitySpec,
    prior: &PriorSpec,
    proposal: &ProposalSpec,
) -> Result<(), SamplerError> {
    let k = prior.k();
    if window.k() != k {
        return Err(SamplerError::DimensionMismatch {
            what: "window",
            got: window.k(),
            expected: k,
        });
    }
    if proposal.k() != k {
        return Err(SamplerError::DimensionMismatch {
            what: "proposal scales",
            got: proposal.k(),
            expected: k,
        });
    }
    match utility {
        UtilitySpec::QuadraticOracle { mean_gradient, .. } => {
            if mean_gradient.len() != k {
                return Err(SamplerError::DimensionMismatch {
                    what: "quadratic oracle",
                    got: mean_gradient.len(),
                    expected: k,
                });
            }
        }
        _ if window.is_empty() => return Err(SamplerError::ScalarUtilityNeedsData),
        _ => {}
    }
    Ok(())
}

/// Runs a full chain: starting at the prior mean, sweep coordinates
/// 1..K in fixed order each iteration, discard `burn_in` sweeps, then
/// record the state after each of the next `keep` sweeps. Fully
/// deterministic given the seed.
pub fn run_chain(
    window: &CompiledWindow,
    utility: &UtilitySpec,
    lambda: f64,
    prior: &PriorSpec,
    proposal: &ProposalSpec,
    config: &SamplerConfig,
    seed: u64,
) -> Result<Chain, SamplerError> {
    if config.keep == 0 {
        return Err(SamplerError::EmptyChain);
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(SamplerError::InvalidLambda(lambda));
    }
    check_dimensions(window, utility, prior, proposal)?;
    let k = prior.k();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut theta = prior.mean().clone();
    let mut current_utility = window.expected_utility(&theta, utility);
    if current_utility == NEG_INFINITY_UTILITY {
        return Err(SamplerError::InfeasibleStart(theta.iter().cloned().collect()));
    }
    let mut current_qf = prior.quadratic_form(&theta);
    let mut accept_counts = vec![0u64; k];
    let mut proposal_counts = vec![0u64; k];
    let mut draws = DMatrix::zeros(config.keep, k);
    let ctx = StepContext {
        window,
        utility,
        lambda,
        prior,
        proposal,
    };
    for sweep in 0..config.burn_in + config.keep {
        for j in 0..k {
            proposal_counts[j] += 1;
            if step_coordinate(&ctx, &mut theta, j, &mut current_utility, &mut current_qf, &mut rng)
            {
                accept_counts[j] += 1;
            }
        }
        if sweep >= config.burn_in {
            draws.row_mut(sweep - config.burn_in).copy_from(&theta.transpose());
        }
    }
    Ok(Chain {
        lambda,
        draws,
        burn_in: config.burn_in,
        accept_counts,
        proposal_counts,
        seed,
        utility_id: utility.id(),
        window_id: window.window_id().to_string(),
    })
}

/// Quantile levels reported for every posterior coordinate.
pub const QUANTILE_LEVELS: [f64; 5] = [0.025, 0.25, 0.5, 0.75, 0.975];

/// Sample moments and per-coordinate empirical quantiles of a chain.
#[derive(Debug, Clone)]
pub struct PosteriorSummary {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// K x 5, columns aligned with `QUANTILE_LEVELS`.
    pub quantiles: DMatrix<f64>,
}

impl PosteriorSummary {
    pub fn k(&self) -> usize {
        self.mean.len()
    }
}

/// Plain-data mirror of `PosteriorSummary` for JSON persistence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSummaryRecord {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub quantile_levels: Vec<f64>,
    pub quantiles: Vec<Vec<f64>>,
}

impl From<&PosteriorSummary> for PosteriorSummaryRecord {
    fn from(s: &PosteriorSummary) -> Self {
        let k = s.k();
        PosteriorSummaryRecord {
            mean: s.mean.iter().cloned().collect(),
            covariance: (0..k)
                .map(|i| s.covariance.row(i).iter().cloned().collect())
                .collect(),
            quantile_levels: QUANTILE_LEVELS.to_vec(),
            quantiles: (0..k)
                .map(|i| s.quantiles.row(i).iter().cloned().collect())
                .collect(),
        }
    }
}

/// Mean, covariance (N-1 divisor), and linear-interpolation quantiles of
/// the kept draws.
pub fn summarize_chain(chain: &Chain) -> Result<PosteriorSummary, SamplerError> {
    summarize_draws(&chain.draws)
}

/// Same as `summarize_chain`, for a raw draw matrix.
pub fn summarize_draws(draws: &DMatrix<f64>) -> Result<PosteriorSummary, SamplerError> {
    let d = draws.nrows();
    let k = draws.ncols();
    if d < 2 {
        return Err(SamplerError::TooFewDraws(d));
    }
    let mean = draws.row_mean().transpose();
    let mut covariance = DMatrix::zeros(k, k);
    for row in draws.row_iter() {
        let diff = row.transpose() - &mean;
        covariance.ger(1.0, &diff, &diff, 1.0);
    }
    covariance /= d as f64 - 1.0;
    let mut quantiles = DMatrix::zeros(k, QUANTILE_LEVELS.len());
    for j in 0..k {
        let mut col: Vec<f64> = draws.column(j).iter().cloned().collect();
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (qi, &q) in QUANTILE_LEVELS.iter().enumerate() {
            quantiles[(j, qi)] = quantile_sorted(&col, q);
        }
    }
    Ok(PosteriorSummary {
        mean,
        covariance,
        quantiles,
    })
}

/// Target acceptance band and pilot-loop sizing for scale calibration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub band_low: f64,
    pub band_high: f64,
    pub pilot_sweeps: usize,
    pub max_rounds: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            band_low: 0.35,
            band_high: 0.6,
            pilot_sweeps: 5_000,
            max_rounds: 20,
        }
    }
}

/// Outcome of the pilot loop. `converged = false` is a warning, not an
/// error: chains remain valid at acceptance rates well outside the band.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub proposal: ProposalSpec,
    pub rates: Vec<f64>,
    pub rounds: usize,
    pub converged: bool,
}

/// Pilot-run calibration: run short chains, multiply each scale by
/// exp(rate_j - band center), stop once every coordinate rate is inside
/// the band or the round budget is exhausted. The returned spec is then
/// frozen; production chains never adapt.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_scales(
    window: &CompiledWindow,
    utility: &UtilitySpec,
    lambda: f64,
    prior: &PriorSpec,
    initial: &ProposalSpec,
    config: &CalibrationConfig,
    seed: u64,
) -> Result<Calibration, SamplerError> {
    if !(config.band_low > 0.0 && config.band_low < config.band_high && config.band_high < 1.0) {
        return Err(SamplerError::InvalidBand(config.band_low, config.band_high));
    }
    let center = 0.5 * (config.band_low + config.band_high);
    let mut proposal = initial.clone();
    let mut rates = vec![0.0; prior.k()];
    for round in 0..config.max_rounds {
        let pilot = run_chain(
            window,
            utility,
            lambda,
            prior,
            &proposal,
            &SamplerConfig {
                burn_in: 0,
                keep: config.pilot_sweeps,
            },
            derive_seed(seed, round as u64),
        )?;
        for j in 0..prior.k() {
            rates[j] = pilot.accept_counts[j] as f64 / pilot.proposal_counts[j] as f64;
        }
        if rates
            .iter()
            .all(|&r| r >= config.band_low && r <= config.band_high)
        {
            return Ok(Calibration {
                proposal,
                rates,
                rounds: round + 1,
                converged: true,
            });
        }
        let scales = proposal
            .scales
            .iter()
            .zip(&rates)
            .map(|(s, r)| s * (r - center).exp())
            .collect();
        proposal = ProposalSpec::new(proposal.alpha, scales)?;
    }
    Ok(Calibration {
        proposal,
        rates,
        rounds: config.max_rounds,
        converged: false,
    })
}

/// Sidecar metadata stored next to a chain's draw CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainSidecar {
    pub lambda: f64,
    pub seed: u64,
    pub burn_in: usize,
    pub keep: usize,
    pub accept_counts: Vec<u64>,
    pub proposal_counts: Vec<u64>,
    pub acceptance_rates: Vec<f64>,
    pub utility: String,
    pub window: String,
}

/// Persists draws as CSV (one column per coordinate, full precision) and
/// the run metadata as a JSON sidecar.
pub fn save_chain(chain: &Chain, csv_path: &Path, json_path: &Path) -> Result<(), SamplerError> {
    let io_err = |path: &Path| {
        let path = path.display().to_string();
        move |source: std::io::Error| SamplerError::Io {
            path: path.clone(),
            source,
        }
    };
    let file = File::create(csv_path).map_err(io_err(csv_path))?;
    let mut out = BufWriter::new(file);
    let header: Vec<String> = (1..=chain.k()).map(|j| format!("theta_{j}")).collect();
    writeln!(out, "{}", header.join(",")).map_err(io_err(csv_path))?;
    for row in chain.draws.row_iter() {
        let line: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        writeln!(out, "{}", line.join(",")).map_err(io_err(csv_path))?;
    }
    out.flush().map_err(io_err(csv_path))?;

    let rates = chain
        .accept_counts
        .iter()
        .zip(&chain.proposal_counts)
        .map(|(a, p)| *a as f64 / (*p).max(1) as f64)
        .collect();
    let sidecar = ChainSidecar {
        lambda: chain.lambda,
        seed: chain.seed,
        burn_in: chain.burn_in,
        keep: chain.len(),
        accept_counts: chain.accept_counts.clone(),
        proposal_counts: chain.proposal_counts.clone(),
        acceptance_rates: rates,
        utility: chain.utility_id.clone(),
        window: chain.window_id.clone(),
    };
    let file = File::create(json_path).map_err(io_err(json_path))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &sidecar).map_err(|e| {
        SamplerError::MalformedChainFile {
            path: json_path.display().to_string(),
            detail: e.to_string(),
        }
    })
}

/// Reloads a chain persisted by `save_chain`.
pub fn load_chain(csv_path: &Path, json_path: &Path) -> Result<Chain, SamplerError> {
    let file = File::open(json_path).map_err(|source| SamplerError::Io {
        path: json_path.display().to_string(),
        source,
    })?;
    let sidecar: ChainSidecar =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| {
            SamplerError::MalformedChainFile {
                path: json_path.display().to_string(),
                detail: e.to_string(),
            }
        })?;
    let file = File::open(csv_path).map_err(|source| SamplerError::Io {
        path: csv_path.display().to_string(),
        source,
    })?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let k = reader
        .headers()
        .map_err(|e| SamplerError::MalformedChainFile {
            path: csv_path.display().to_string(),
            detail: e.to_string(),
        })?
        .len();
    let mut rows: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| SamplerError::MalformedChainFile {
            path: csv_path.display().to_string(),
            detail: e.to_string(),
        })?;
        for field in record.iter() {
            rows.push(
                field
                    .parse()
                    .map_err(|_| SamplerError::MalformedChainFile {
                        path: csv_path.display().to_string(),
                        detail: format!("`{field}` is not a float"),
                    })?,
            );
        }
        n += 1;
    }
    if n * k != rows.len() || n != sidecar.keep {
        return Err(SamplerError::MalformedChainFile {
            path: csv_path.display().to_string(),
            detail: format!("expected {} x {k} draws, found {n} rows", sidecar.keep),
        });
    }
    Ok(Chain {
        lambda: sidecar.lambda,
        draws: DMatrix::from_row_slice(n, k, &rows),
        burn_in: sidecar.burn_in,
        accept_counts: sidecar.accept_counts,
        proposal_counts: sidecar.proposal_counts,
        seed: sidecar.seed,
        utility_id: sidecar.utility,
        window_id: sidecar.window,
    })
}
