//! Demo computations behind the wasm exports, kept as plain Rust so they
//! run (and are tested) on the host. Every function returns a JSON string
//! the page can feed straight into its plots.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use ppp_gibbs::diagnostics::acceptance_rates;
use ppp_gibbs::frontier::kneedle_select;
use ppp_gibbs::laplace::{analytic_frontier, mv_posterior, QuadraticModel};
use ppp_gibbs::market::window;
use ppp_gibbs::policy::{CompiledWindow, UtilitySpec};
use ppp_gibbs::predictive::{density_grid, oos_paths};
use ppp_gibbs::sampler::{
    run_chain, summarize_chain, PriorSpec, ProposalSpec, SamplerConfig,
};
use ppp_gibbs::synth::{generate, SynthConfig};

/// Deterministic SPD matrix from a seed, with eigenvalue spread that makes
/// the frontier's condition number move visibly across the grid.
fn seeded_spd(k: usize, scale: f64, seed: u64) -> DMatrix<f64> {
    // Small multiplicative-congruential stream; enough structure for a
    // demo matrix and fully portable.
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let a = DMatrix::from_fn(k, k, |_, _| next());
    (&a * a.transpose()) * scale + DMatrix::identity(k, k) * (0.05 * scale)
}

#[derive(Serialize)]
struct FrontierView {
    lambdas: Vec<f64>,
    kappa: Vec<f64>,
    neg_log_det: Vec<f64>,
    deceleration: Vec<f64>,
    scores: Vec<f64>,
    selected_index: usize,
    lambda_star: f64,
    tau_star: f64,
}

/// Analytic identification frontier of a seeded quadratic model across a
/// geometric lambda grid, with the KNEEDLE selection. tau_star = gamma *
/// lambda_star stays put as gamma moves, which is the point of the plot.
pub fn frontier_view(gamma: f64, q_scale: f64, seed: u64) -> Result<String, String> {
    if !(gamma > 0.0) || !q_scale.is_finite() || q_scale <= 0.0 {
        return Err("gamma and q_scale must be positive".to_string());
    }
    let k = 6;
    let q = seeded_spd(k, q_scale, seed);
    let theta_hat = DVector::from_fn(k, |i, _| 0.3 - 0.08 * i as f64);
    let model = QuadraticModel::from_expansion_point(theta_hat, q, gamma)
        .map_err(|e| e.to_string())?;
    let prior = PriorSpec::standard(k);
    // Fixed tau grid re-expressed in lambda for this gamma, so moving the
    // gamma slider sweeps the same information levels.
    let grid: Vec<f64> = ppp_gibbs::frontier::DEFAULT_LAMBDA_GRID
        .iter()
        .map(|l| l * 3.0 / gamma)
        .collect();
    let points = analytic_frontier(&model, &prior, &grid).map_err(|e| e.to_string())?;
    let selection = kneedle_select(&points).map_err(|e| e.to_string())?;
    let view = FrontierView {
        lambdas: points.iter().map(|p| p.lambda).collect(),
        kappa: points.iter().map(|p| p.kappa).collect(),
        neg_log_det: points.iter().map(|p| p.neg_log_det).collect(),
        deceleration: points.iter().map(|p| p.deceleration).collect(),
        scores: selection.scores.clone(),
        selected_index: selection.index,
        lambda_star: selection.lambda_star,
        tau_star: gamma * selection.lambda_star,
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct SamplerView {
    draws: Vec<[f64; 2]>,
    acceptance_rates: Vec<f64>,
    chain_mean: Vec<f64>,
    chain_cov: Vec<Vec<f64>>,
    exact_mean: Vec<f64>,
    exact_cov: Vec<Vec<f64>>,
}

/// A short two-coordinate Metropolis-within-Gibbs run on a quadratic
/// oracle target, with the closed-form posterior alongside for the
/// overlay ellipse. Draws are thinned to at most `max_points`.
pub fn sampler_view(
    lambda: f64,
    gamma: f64,
    alpha: f64,
    scale: f64,
    sweeps: usize,
    seed: u64,
) -> Result<String, String> {
    if sweeps == 0 || sweeps > 200_000 {
        return Err("sweeps must be in 1..=200000".to_string());
    }
    let k = 2;
    let q = DMatrix::from_row_slice(k, k, &[1.0, 0.55, 0.55, 0.8]);
    let theta_hat = DVector::from_column_slice(&[1.2, -0.6]);
    let model = QuadraticModel::from_expansion_point(theta_hat, q, gamma)
        .map_err(|e| e.to_string())?;
    let prior = PriorSpec::standard(k);
    let utility: UtilitySpec = model.utility_spec().map_err(|e| e.to_string())?;
    let proposal = ProposalSpec::new(alpha, vec![scale; k]).map_err(|e| e.to_string())?;
    let chain = run_chain(
        &CompiledWindow::oracle(k),
        &utility,
        lambda,
        &prior,
        &proposal,
        &SamplerConfig {
            burn_in: sweeps / 5,
            keep: sweeps,
        },
        seed,
    )
    .map_err(|e| e.to_string())?;
    let summary = summarize_chain(&chain).map_err(|e| e.to_string())?;
    let (exact_mean, exact_cov) = mv_posterior(&model, lambda, &prior).map_err(|e| e.to_string())?;

    let max_points = 2_000;
    let stride = (chain.len() / max_points).max(1);
    let draws: Vec<[f64; 2]> = (0..chain.len())
        .step_by(stride)
        .map(|i| [chain.draws[(i, 0)], chain.draws[(i, 1)]])
        .collect();
    let view = SamplerView {
        draws,
        acceptance_rates: acceptance_rates(&chain).map_err(|e| e.to_string())?,
        chain_mean: summary.mean.iter().cloned().collect(),
        chain_cov: (0..k)
            .map(|i| summary.covariance.row(i).iter().cloned().collect())
            .collect(),
        exact_mean: exact_mean.iter().cloned().collect(),
        exact_cov: (0..k)
            .map(|i| exact_cov.row(i).iter().cloned().collect())
            .collect(),
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct DensityView {
    grid: Vec<f64>,
    policy_density: Vec<f64>,
    benchmark_density: Vec<f64>,
    log_density_ratio: Vec<f64>,
    mean_policy_return: f64,
    mean_benchmark_return: f64,
}

/// Posterior-predictive return densities on a synthetic market: plant a
/// signal, sample the Gibbs posterior at the chosen lambda, push the
/// draws through the out-of-sample months, and compare against the
/// value-weighted benchmark.
pub fn density_view(lambda: f64, signal: f64, seed: u64) -> Result<String, String> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err("lambda must be non-negative".to_string());
    }
    let mut config = SynthConfig::new(40, 48, 2, seed);
    config.signal = vec![signal, 0.0];
    config.noise_sd = 0.04;
    config.market_vol = 0.015;
    let panel = generate(&config).map_err(|e| e.to_string())?;
    let months = panel.months().to_vec();
    let estimation = window(&panel, &months[35], 36).map_err(|e| e.to_string())?;
    let oos = window(&panel, months.last().unwrap(), 12).map_err(|e| e.to_string())?;
    let compiled = CompiledWindow::from_slices(&estimation).map_err(|e| e.to_string())?;
    let prior = PriorSpec::standard(2);
    let chain = run_chain(
        &compiled,
        &UtilitySpec::Log,
        lambda,
        &prior,
        &ProposalSpec::uniform(2, 0.6).map_err(|e| e.to_string())?,
        &SamplerConfig {
            burn_in: 1_000,
            keep: 4_000,
        },
        seed ^ 0x9e37,
    )
    .map_err(|e| e.to_string())?;
    let paths = oos_paths(&chain.draws, &oos).map_err(|e| e.to_string())?;
    let policy_pool: Vec<f64> = paths.iter().cloned().collect();
    let benchmark: Vec<f64> = oos
        .iter()
        .map(|s| s.benchmark_weights.dot(&s.next_returns))
        .collect();
    let grid = density_grid(&policy_pool, &benchmark, 161).map_err(|e| e.to_string())?;
    let view = DensityView {
        mean_policy_return: policy_pool.iter().sum::<f64>() / policy_pool.len() as f64,
        mean_benchmark_return: benchmark.iter().sum::<f64>() / benchmark.len() as f64,
        grid: grid.grid,
        policy_density: grid.policy_density,
        benchmark_density: grid.benchmark_density,
        log_density_ratio: grid.log_density_ratio,
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}
