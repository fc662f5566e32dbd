//! Acceptance suite: every criterion is one test that prints a PASS line
//! with the quantities it checked. Tolerances are pinned in code.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::Distribution;

use ppp_gibbs::diagnostics::{effective_sample_size, mpsrf};
use ppp_gibbs::frontier::{kneedle_select, FrontierPoint, DEFAULT_LAMBDA_GRID};
use ppp_gibbs::laplace::{mv_posterior, QuadraticModel};
use ppp_gibbs::market::window;
use ppp_gibbs::policy::{CompiledWindow, UtilitySpec};
use ppp_gibbs::predictive::{build_predictive_summary, hogg_kurtosis, PERIODS_PER_YEAR, STAT_NAMES};
use ppp_gibbs::sampler::{
    calibrate_scales, run_chain, summarize_chain, CalibrationConfig, Chain, PriorSpec,
    ProposalSpec, SamplerConfig,
};
use ppp_gibbs::synth::{generate, SynthConfig};

fn pass(number: u32, what: &str, detail: String) {
    println!("ACCEPTANCE {number:02} {what}: PASS ({detail})");
}

fn random_spd(k: usize, scale: f64, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(k, k, |_, _| rng.random::<f64>() - 0.5);
    (&a * a.transpose()) * scale + DMatrix::identity(k, k) * (0.1 * scale)
}

fn standard_normals(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
            z
        })
        .collect()
}

/// Coordinate-wise effective sample sizes of a chain.
fn chain_ess(chain: &Chain) -> Vec<f64> {
    (0..chain.k())
        .map(|j| effective_sample_size(&chain.coordinate(j)).expect("ess"))
        .collect()
}

/// Runs a calibrated chain on a quadratic-oracle target.
fn oracle_chain(
    model: &QuadraticModel,
    lambda: f64,
    config: &SamplerConfig,
    seed: u64,
) -> Chain {
    let k = model.k();
    let prior = PriorSpec::standard(k);
    let window = CompiledWindow::oracle(k);
    let utility = model.utility_spec().expect("oracle utility");
    let calibration = calibrate_scales(
        &window,
        &utility,
        lambda,
        &prior,
        &ProposalSpec::uniform(k, 1.0).expect("initial proposal"),
        &CalibrationConfig {
            pilot_sweeps: 2_000,
            max_rounds: 12,
            ..CalibrationConfig::default()
        },
        seed ^ 0x5eed,
    )
    .expect("calibration");
    run_chain(
        &window,
        &utility,
        lambda,
        &prior,
        &calibration.proposal,
        config,
        seed,
    )
    .expect("chain")
}

#[test]
fn criterion_01_quadratic_oracle_equivalence() {
    let start = Instant::now();
    let k = 6;
    let mut rng = ChaCha12Rng::seed_from_u64(101);
    let q = random_spd(k, 0.4, &mut rng);
    let g = DVector::from_fn(k, |i, _| 0.3 + 0.05 * i as f64);
    let model = QuadraticModel::with_mv_optimum(g, q, 3.0).unwrap();
    let prior = PriorSpec::standard(k);
    let lambda = 1.0;
    let (theta_bar, sigma) = mv_posterior(&model, lambda, &prior).unwrap();

    let chain = oracle_chain(
        &model,
        lambda,
        &SamplerConfig {
            burn_in: 20_000,
            keep: 50_000,
        },
        1001,
    );
    let summary = summarize_chain(&chain).unwrap();
    let ess = chain_ess(&chain);

    let mut max_z: f64 = 0.0;
    for j in 0..k {
        let se = (sigma[(j, j)] / ess[j]).sqrt();
        let z = (summary.mean[j] - theta_bar[j]).abs() / se;
        max_z = max_z.max(z);
        assert!(
            z <= 3.0,
            "mean[{j}] = {} vs {} (z = {z:.2})",
            summary.mean[j],
            theta_bar[j]
        );
    }
    for i in 0..k {
        for j in 0..k {
            let n_eff = ess[i].min(ess[j]);
            let se =
                ((sigma[(i, i)] * sigma[(j, j)] + sigma[(i, j)].powi(2)) / n_eff).sqrt();
            let z = (summary.covariance[(i, j)] - sigma[(i, j)]).abs() / se;
            assert!(
                z <= 3.0,
                "cov[{i},{j}] = {} vs {} (z = {z:.2})",
                summary.covariance[(i, j)],
                sigma[(i, j)]
            );
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "took {elapsed:.1}s");
    pass(
        1,
        "quadratic-oracle equivalence",
        format!("max |z| = {max_z:.2}, {elapsed:.1}s"),
    );
}

#[test]
fn criterion_02_tau_invariance() {
    let k = 4;
    let mut rng = ChaCha12Rng::seed_from_u64(202);
    // Scale Q so lambda*gamma*Q is O(1) on the tau = 6000 runs.
    let q = random_spd(k, 2e-4, &mut rng);
    let theta_hat = DVector::from_fn(k, |i, _| 0.4 - 0.1 * i as f64);
    let model_a = QuadraticModel::from_expansion_point(theta_hat.clone(), q.clone(), 3.0).unwrap();
    let model_b = QuadraticModel::from_expansion_point(theta_hat, q, 1.0).unwrap();
    let config = SamplerConfig {
        burn_in: 20_000,
        keep: 50_000,
    };
    let chain_a = oracle_chain(&model_a, 2_000.0, &config, 2002);
    let chain_b = oracle_chain(&model_b, 6_000.0, &config, 2003);
    let summary_a = summarize_chain(&chain_a).unwrap();
    let summary_b = summarize_chain(&chain_b).unwrap();
    let ess_a = chain_ess(&chain_a);
    let ess_b = chain_ess(&chain_b);
    let prior = PriorSpec::standard(k);
    let (_, sigma) = mv_posterior(&model_a, 2_000.0, &prior).unwrap();
    let mut max_z: f64 = 0.0;
    for j in 0..k {
        let se = (sigma[(j, j)] / ess_a[j] + sigma[(j, j)] / ess_b[j]).sqrt();
        let z = (summary_a.mean[j] - summary_b.mean[j]).abs() / se;
        max_z = max_z.max(z);
        assert!(
            z <= 3.0,
            "coordinate {j}: {} vs {} (z = {z:.2})",
            summary_a.mean[j],
            summary_b.mean[j]
        );
    }
    pass(
        2,
        "tau-invariance (2000, 3) vs (6000, 1)",
        format!("max |z| = {max_z:.2}"),
    );
}

#[test]
fn criterion_03_prior_recovery() {
    let k = 6;
    let prior = PriorSpec::standard(k);
    let window = CompiledWindow::oracle(k);
    let utility = UtilitySpec::quadratic_oracle(
        DVector::zeros(k),
        DMatrix::identity(k, k),
        1.0,
    )
    .unwrap();
    let calibration = calibrate_scales(
        &window,
        &utility,
        0.0,
        &prior,
        &ProposalSpec::uniform(k, 1.0).unwrap(),
        &CalibrationConfig {
            pilot_sweeps: 2_000,
            ..CalibrationConfig::default()
        },
        303,
    )
    .unwrap();
    let chain = run_chain(
        &window,
        &utility,
        0.0,
        &prior,
        &calibration.proposal,
        &SamplerConfig {
            burn_in: 20_000,
            keep: 50_000,
        },
        3003,
    )
    .unwrap();
    let summary = summarize_chain(&chain).unwrap();
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    let mut worst_corr: f64 = 0.0;
    for j in 0..k {
        worst_mean = worst_mean.max(summary.mean[j].abs());
        worst_var = worst_var.max((summary.covariance[(j, j)] - 1.0).abs());
    }
    for i in 0..k {
        for j in i + 1..k {
            let corr = summary.covariance[(i, j)]
                / (summary.covariance[(i, i)] * summary.covariance[(j, j)]).sqrt();
            worst_corr = worst_corr.max(corr.abs());
        }
    }
    assert!(worst_mean <= 0.02, "worst mean deviation {worst_mean}");
    assert!(worst_var <= 0.05, "worst variance deviation {worst_var}");
    assert!(worst_corr <= 0.03, "worst off-diagonal correlation {worst_corr}");
    pass(
        3,
        "prior recovery at lambda = 0",
        format!("|mean| <= {worst_mean:.4}, |var-1| <= {worst_var:.4}, |corr| <= {worst_corr:.4}"),
    );
}

#[test]
fn criterion_04_log_det_identity() {
    // Analytic: 20 random SPD instances to 1e-10.
    let mut rng = ChaCha12Rng::seed_from_u64(404);
    let prior6 = PriorSpec::standard(6);
    let mut worst_analytic: f64 = 0.0;
    for trial in 0..20 {
        let k = 6;
        let q = random_spd(k, 10f64.powi((trial % 4) as i32 - 3), &mut rng);
        let gamma = 0.5 + rng.random::<f64>() * 5.0;
        let lambda = 10f64.powf(1.0 + 3.0 * rng.random::<f64>());
        let model = QuadraticModel::with_mv_optimum(DVector::zeros(k), q.clone(), gamma).unwrap();
        let (_, sigma) = mv_posterior(&model, lambda, &prior6).unwrap();
        let neg_log_det = -(sigma.determinant().ln());
        let closed = (DMatrix::identity(k, k) + &q * (lambda * gamma))
            .determinant()
            .ln();
        let err = (neg_log_det - closed).abs() / closed.abs().max(1.0);
        worst_analytic = worst_analytic.max(err);
        assert!(err <= 1e-10, "trial {trial}: relative error {err:.2e}");
    }

    // Sampled counterpart across the default grid, within 3 MC SEs.
    let k = 4;
    let gamma = 3.0;
    let q = random_spd(k, 3e-5, &mut rng);
    let model = QuadraticModel::with_mv_optimum(DVector::zeros(k), q.clone(), gamma).unwrap();
    let config = SamplerConfig {
        burn_in: 10_000,
        keep: 30_000,
    };
    let mut max_z: f64 = 0.0;
    for &lambda in DEFAULT_LAMBDA_GRID.iter() {
        let chain = oracle_chain(&model, lambda, &config, 404_000 + lambda as u64);
        let summary = summarize_chain(&chain).unwrap();
        let sampled = -(summary.covariance.determinant().ln());
        let closed = (DMatrix::identity(k, k) + &q * (lambda * gamma))
            .determinant()
            .ln();
        let n_eff = chain_ess(&chain)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        // Wishart-style delta-method spread of a log determinant.
        let se = (2.0 * k as f64 / n_eff).sqrt();
        let z = (sampled - closed).abs() / se;
        max_z = max_z.max(z);
        assert!(
            z <= 3.0,
            "lambda {lambda}: sampled {sampled:.4} vs closed {closed:.4} (z = {z:.2})"
        );
    }
    pass(
        4,
        "-log det Sigma = log det(I + lambda gamma Q)",
        format!("analytic <= {worst_analytic:.1e}, sampled max |z| = {max_z:.2}"),
    );
}

#[test]
fn criterion_05_planted_signal_recovery() {
    let start = Instant::now();
    let mut config = SynthConfig::new(200, 240, 6, 505);
    config.signal = vec![0.05, 0.0, 0.0, 0.0, 0.0, 0.0];
    config.noise_sd = 0.01;
    config.market_vol = 0.005;
    let panel = generate(&config).unwrap();
    let months = panel.months().to_vec();
    let slices = window(&panel, months.last().unwrap(), 240).unwrap();
    let compiled = CompiledWindow::from_slices(&slices).unwrap();

    // Top of the grid used for this run; high enough that the data
    // dominate the prior in the identified direction.
    let grid = [500.0, 1000.0, 2000.0];
    let lambda_top = *grid.last().unwrap();
    let prior = PriorSpec::standard(6);
    let utility = UtilitySpec::Log;
    let calibration = calibrate_scales(
        &compiled,
        &utility,
        lambda_top,
        &prior,
        &ProposalSpec::uniform(6, 0.5).unwrap(),
        &CalibrationConfig {
            pilot_sweeps: 2_000,
            max_rounds: 12,
            ..CalibrationConfig::default()
        },
        515,
    )
    .unwrap();
    let chain = run_chain(
        &compiled,
        &utility,
        lambda_top,
        &prior,
        &calibration.proposal,
        &SamplerConfig {
            burn_in: 20_000,
            keep: 50_000,
        },
        5005,
    )
    .unwrap();
    let summary = summarize_chain(&chain).unwrap();
    // Signal coordinate: posterior 2.5 percentile above zero.
    assert!(
        summary.quantiles[(0, 0)] > 0.0,
        "q2.5(theta_1) = {}",
        summary.quantiles[(0, 0)]
    );
    // Null coordinates: 95% bands cover zero.
    for j in 1..6 {
        assert!(
            summary.quantiles[(j, 0)] < 0.0 && summary.quantiles[(j, 4)] > 0.0,
            "coordinate {j} band [{}, {}] misses zero",
            summary.quantiles[(j, 0)],
            summary.quantiles[(j, 4)]
        );
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 300.0, "took {elapsed:.1}s");
    pass(
        5,
        "planted-signal recovery",
        format!(
            "q2.5(theta_1) = {:.2} > 0, null bands cover 0, {elapsed:.1}s",
            summary.quantiles[(0, 0)]
        ),
    );
}

#[test]
fn criterion_06_kneedle_correctness() {
    // Ten synthetic frontiers with a single planted curvature break.
    let j_total = 12;
    for trial in 0..10 {
        let plant = 2 + (trial % 8);
        let slow = 0.01 + 0.002 * trial as f64;
        let fast = 4.0 + trial as f64;
        let points: Vec<FrontierPoint> = (0..j_total)
            .map(|j| {
                let kappa = 1.0 + j as f64;
                let deceleration = if j <= plant {
                    slow * j as f64
                } else {
                    slow * plant as f64 + fast * (j - plant) as f64
                };
                FrontierPoint {
                    lambda: 500.0 * (j as f64 + 1.0),
                    kappa,
                    log_kappa: kappa.ln(),
                    neg_log_det: 0.0,
                    deceleration,
                }
            })
            .collect();
        let selection = kneedle_select(&points).unwrap();
        // Independent check: direct enumeration of the normalized score.
        let kappas: Vec<f64> = points.iter().map(|p| p.kappa).collect();
        let decs: Vec<f64> = points.iter().map(|p| p.deceleration).collect();
        let (kmin, kmax) = (kappas[0], kappas[j_total - 1]);
        let (dmin, dmax) = (decs[0], decs[j_total - 1]);
        let brute = (0..j_total)
            .map(|j| {
                ((kappas[j] - kmin) / (kmax - kmin) - (decs[j] - dmin) / (dmax - dmin)).abs()
            })
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(selection.index, plant, "trial {trial}");
        assert_eq!(selection.index, brute, "trial {trial} vs brute force");
    }

    // Hand example: kappa = [1, 2, 10], Delta = [0, 0.9, 1] selects the
    // middle point.
    let hand: Vec<FrontierPoint> = [(1.0, 0.0), (2.0, 0.9), (10.0, 1.0)]
        .iter()
        .enumerate()
        .map(|(j, &(kappa, deceleration))| FrontierPoint {
            lambda: 500.0 * (j as f64 + 1.0),
            kappa,
            log_kappa: kappa.ln(),
            neg_log_det: 0.0,
            deceleration,
        })
        .collect();
    let selection = kneedle_select(&hand).unwrap();
    assert_eq!(selection.index, 1);
    let expected = (1.0 / 9.0 - 0.9f64).abs() / std::f64::consts::SQRT_2;
    assert!((selection.scores[1] - expected).abs() <= 1e-12);
    pass(
        6,
        "KNEEDLE knee detection",
        format!("10 planted knees recovered; hand score {expected:.4}"),
    );
}

#[test]
fn criterion_07_mpsrf_calibration() {
    let k = 6;
    let mut rng = ChaCha12Rng::seed_from_u64(707);
    let q = random_spd(k, 0.4, &mut rng);
    let g = DVector::from_fn(k, |i, _| 0.2 + 0.03 * i as f64);
    let model = QuadraticModel::with_mv_optimum(g, q, 3.0).unwrap();
    let config = SamplerConfig {
        burn_in: 10_000,
        keep: 50_000,
    };
    let chains: Vec<Chain> = [7001u64, 7002, 7003]
        .iter()
        .map(|&seed| oracle_chain(&model, 1.0, &config, seed))
        .collect();
    let sets: Vec<&DMatrix<f64>> = chains.iter().map(|c| &c.draws).collect();
    let r = mpsrf(&sets).unwrap();
    assert!(r <= 1.01, "MPSRF {r}");

    let identical = mpsrf(&[&chains[0].draws, &chains[0].draws]).unwrap();
    let n = chains[0].len() as f64;
    let bound = ((n - 1.0) / n).sqrt();
    assert!((identical - bound).abs() <= 1e-12, "{identical} vs {bound}");
    pass(
        7,
        "MPSRF convergence",
        format!("3 seeds: R = {r:.5}; identical chains: {identical:.6}"),
    );
}

#[test]
fn criterion_08_ess_sanity() {
    let n = 100_000;
    let iid = standard_normals(n, 808);
    let ess_iid = effective_sample_size(&iid).unwrap();
    assert!(ess_iid >= 0.9 * n as f64, "iid ESS {ess_iid}");

    // AR(1) with phi = 0.5, against the brute-force truncated prediction.
    let mut rng = ChaCha12Rng::seed_from_u64(818);
    let mut series = Vec::with_capacity(n);
    let mut x = 0.0;
    for _ in 0..n {
        let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
        x = 0.5 * x + z;
        series.push(x);
    }
    let ess = effective_sample_size(&series).unwrap();
    let mean = series.iter().sum::<f64>() / n as f64;
    let c0: f64 = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let mut rho_sum = 0.0;
    for lag in 1..n {
        let mut c = 0.0;
        for t in 0..n - lag {
            c += (series[t] - mean) * (series[t + lag] - mean);
        }
        let rho = c / n as f64 / c0;
        if rho <= 0.0 {
            break;
        }
        rho_sum += rho;
    }
    let predicted = (n as f64 / (1.0 + rho_sum)).min(n as f64);
    let gap = (ess / n as f64 - predicted / n as f64).abs();
    assert!(gap <= 0.05, "ESS {ess} vs prediction {predicted}");
    pass(
        8,
        "effective sample size",
        format!(
            "iid: {:.2}N; AR(1): {:.3}N vs predicted {:.3}N",
            ess_iid / n as f64,
            ess / n as f64,
            predicted / n as f64
        ),
    );
}

#[test]
fn criterion_09_predictive_linearity_and_benchmark_reduction() {
    let mut config = SynthConfig::new(60, 60, 3, 909);
    config.signal = vec![0.02, 0.0, -0.01];
    let panel = generate(&config).unwrap();
    let months = panel.months().to_vec();
    let oos = window(&panel, months.last().unwrap(), 24).unwrap();

    // Spread-out draws: linearity of the mean return.
    let mut rng = ChaCha12Rng::seed_from_u64(919);
    let draws = DMatrix::from_fn(500, 3, |_, _| {
        let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
        2.0 * z
    });
    let summary =
        build_predictive_summary(&draws, &oos, &UtilitySpec::Log, None, PERIODS_PER_YEAR)
            .unwrap();
    let posterior_mean_of_means = summary.distribution.stats[0].as_ref().unwrap().mean;
    let gap = (summary.decision_path.mean - posterior_mean_of_means).abs();
    assert!(gap <= 1e-9, "linearity gap {gap:.2e}");

    // All-zero draws: every statistic equals the value-weighted benchmark.
    let zeros = DMatrix::zeros(10, 3);
    let reduced =
        build_predictive_summary(&zeros, &oos, &UtilitySpec::Log, None, PERIODS_PER_YEAR)
            .unwrap();
    for (idx, name) in STAT_NAMES.iter().enumerate() {
        match (
            reduced.distribution.stats[idx].as_ref(),
            reduced.benchmark_value_weighted.get(idx),
        ) {
            (Some(s), Some(b)) => {
                assert!(
                    (s.mean - b).abs() <= 1e-12 * b.abs().max(1.0),
                    "{name}: {} vs benchmark {}",
                    s.mean,
                    b
                );
                assert!(s.sd.abs() <= 1e-12);
            }
            (None, None) => {}
            other => panic!("{name}: inconsistent degeneracy {other:?}"),
        }
    }
    pass(
        9,
        "predictive linearity + benchmark reduction",
        format!("mean-return gap {gap:.1e}"),
    );
}

#[test]
fn criterion_10_hogg_kurtosis() {
    let mut two_point = vec![-1.0; 50];
    two_point.extend(vec![1.0; 50]);
    let kurt = hogg_kurtosis(&two_point).unwrap();
    assert_eq!(kurt, -163.0);

    let normals = standard_normals(1_000_000, 1010);
    let kurt_normal = hogg_kurtosis(&normals).unwrap();
    assert!(
        (kurt_normal - (-4.48)).abs() <= 0.5,
        "normal Hogg {kurt_normal}"
    );
    pass(
        10,
        "Hogg kurtosis",
        format!("two-point: {kurt}; N(0,1) x 1e6: {kurt_normal:.2}"),
    );
}

#[test]
fn criterion_11_acceptance_rate_calibration() {
    let mut config = SynthConfig::new(200, 240, 6, 1111);
    config.signal = vec![0.05, 0.0, 0.0, 0.0, 0.0, 0.0];
    config.noise_sd = 0.01;
    config.market_vol = 0.005;
    let panel = generate(&config).unwrap();
    let months = panel.months().to_vec();
    let slices = window(&panel, months.last().unwrap(), 240).unwrap();
    let compiled = CompiledWindow::from_slices(&slices).unwrap();
    let prior = PriorSpec::standard(6);
    let utility = UtilitySpec::Log;
    let lambda_mid = 1_000.0;
    // Calibrate toward the interior of the band so the confirmation chain
    // sits inside [0.35, 0.6] with Monte Carlo room to spare.
    let calibration = calibrate_scales(
        &compiled,
        &utility,
        lambda_mid,
        &prior,
        &ProposalSpec::uniform(6, 0.5).unwrap(),
        &CalibrationConfig {
            band_low: 0.40,
            band_high: 0.52,
            pilot_sweeps: 3_000,
            max_rounds: 20,
        },
        1121,
    )
    .unwrap();
    assert!(calibration.converged, "pilot rates {:?}", calibration.rates);
    let confirm = run_chain(
        &compiled,
        &utility,
        lambda_mid,
        &prior,
        &calibration.proposal,
        &SamplerConfig {
            burn_in: 2_000,
            keep: 10_000,
        },
        1131,
    )
    .unwrap();
    let rates: Vec<f64> = confirm
        .accept_counts
        .iter()
        .zip(&confirm.proposal_counts)
        .map(|(a, p)| *a as f64 / *p as f64)
        .collect();
    for (j, rate) in rates.iter().enumerate() {
        assert!(
            *rate >= 0.35 && *rate <= 0.6,
            "coordinate {j} rate {rate} outside [0.35, 0.6]"
        );
    }
    pass(
        11,
        "acceptance-rate calibration",
        format!("rates {:?}", rates.iter().map(|r| (r * 100.0).round() / 100.0).collect::<Vec<_>>()),
    );
}
