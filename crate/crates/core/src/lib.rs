//! Generalized-Bayesian estimation of characteristic-based parametric
//! portfolio policies.
//!
//! The posterior over tilt coefficients is the exponentiated-utility
//! update p_lambda(theta | data) proportional to
//! exp(lambda * U(data, theta)) * pi(theta), sampled with
//! Metropolis-within-Gibbs under symmetric stable proposals. The learning
//! rate lambda is chosen in-sample from the identification frontier
//! (posterior precision against condition-number fragility) with a
//! KNEEDLE knee rule, and the selected posterior feeds out-of-sample
//! return distributions, convergence diagnostics, and factor attribution.
//! Closed-form quadratic (Laplace) analytics provide exact targets the
//! sampler is verified against.

pub mod attribution;
pub mod diagnostics;
pub mod frontier;
pub mod laplace;
pub mod market;
pub mod policy;
pub mod predictive;
pub mod sampler;
pub mod stable;
pub mod synth;
mod stats;

pub use market::{
    benchmark_weights, load_panel, standardize_slice, window, CharacteristicPanel, DataError,
    MonthCrossSection, PanelSchema, StandardizedSlice, WeightScheme,
};
pub use policy::{
    certainty_equivalent, portfolio_return, portfolio_weights, sample_expected_utility,
    utility_value, CompiledWindow, PolicyError, Theta, UtilitySpec,
};
pub use sampler::{
    calibrate_scales, coordinate_step, derive_seed, lambda_seed, load_chain, run_chain,
    save_chain, summarize_chain, summarize_draws, Calibration, CalibrationConfig, Chain,
    ChainSidecar, PosteriorSummary, PosteriorSummaryRecord, PriorSpec, ProposalSpec,
    SamplerConfig, SamplerError, DEFAULT_PROPOSAL_ALPHA, QUANTILE_LEVELS,
};
pub use frontier::{
    build_frontier, calibrated_chain, covariance_geometry, frontier_slope,
    information_deceleration, kneedle_select, sweep, write_frontier_csv, FrontierError,
    FrontierPoint, KneeSelection, SweepConfig, SweepOutcome, DEFAULT_LAMBDA_GRID,
};
pub use diagnostics::{
    acceptance_rates, diagnose, effective_sample_size, mpsrf, posterior_correlations,
    write_report_json, ChainDiagnostics, DiagnosticsError, DiagnosticsReport,
};
pub use laplace::{
    analytic_frontier, ce_quadratic, gaussian_entropy_kl, mv_posterior, quadratic_posterior,
    tau_star_check, EntropyKl, LaplaceError, QuadraticModel, TauStarReport,
};
pub use predictive::{
    build_predictive_summary, decision_path, density_grid, hogg_kurtosis, oos_paths, path_stats,
    predictive_summary, silverman_bandwidth, write_density_csv, write_summary_csv, DensityGrid,
    PathStats, PredictiveError, PredictiveSummary, StatDistribution, StatSummary,
    PERIODS_PER_YEAR, STAT_NAMES,
};
pub use attribution::{
    default_hac_lag, hac_tstats, load_factor_panel, ols_fit, posterior_attribution,
    variance_shares, write_attribution_csv, AttributionError, FactorPanel, OlsFit,
    PosteriorAttribution, VarianceShares,
};
pub use synth::{generate, SynthConfig, SynthError};
