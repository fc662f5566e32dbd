//! The Gibbs posterior over out-of-sample portfolio returns: per-draw
//! return paths, path statistics (Sharpe, certainty equivalent, the
//! mean-median skew measure, Hogg tail-ratio kurtosis), posterior
//! summaries across draws, the decision-theoretic path built from the
//! posterior-mean coefficients, and density grids for plotting.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::market::{fmt_f64, StandardizedSlice};
use crate::policy::{certainty_equivalent, utility_value, CompiledWindow, PolicyError, UtilitySpec};
use crate::stats::{mean, quantile, quantile_sorted, sample_variance};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Error)]
pub enum PredictiveError {
    #[error("theta draws have {got} columns; out-of-sample slices carry K = {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need at least {min} observations; got {got}")]
    SeriesTooShort { min: usize, got: usize },
    #[error("tail-ratio denominator is zero (constant or near-constant series)")]
    ZeroDenominator,
    #[error("path needs at least two months; got {0}")]
    PathTooShort(usize),
    #[error("risk-free series has {got} months; path has {expected}")]
    RiskFreeLengthMismatch { expected: usize, got: usize },
    #[error("posterior summary needs at least two draws; got {0}")]
    TooFewDraws(usize),
    #[error("density estimation needs non-degenerate data")]
    DegenerateDensity,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Per-draw out-of-sample return paths: entry (d, t) is the portfolio
/// return of theta draw d in out-of-sample month t.
pub fn oos_paths(
    theta_draws: &DMatrix<f64>,
    oos_slices: &[StandardizedSlice],
) -> Result<DMatrix<f64>, PredictiveError> {
    if oos_slices.is_empty() {
        return Err(PredictiveError::SeriesTooShort { min: 1, got: 0 });
    }
    if theta_draws.nrows() == 0 {
        return Err(PredictiveError::TooFewDraws(0));
    }
    let window = CompiledWindow::from_slices(oos_slices)?;
    if window.k() != theta_draws.ncols() {
        return Err(PredictiveError::DimensionMismatch {
            expected: window.k(),
            got: theta_draws.ncols(),
        });
    }
    let d = theta_draws.nrows();
    let row_returns = |i: usize| {
        let theta = theta_draws.row(i).transpose();
        window.portfolio_returns(&theta)
    };
    #[cfg(feature = "parallel")]
    let rows: Vec<Vec<f64>> = (0..d).into_par_iter().map(row_returns).collect();
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<Vec<f64>> = (0..d).map(row_returns).collect();
    let m = oos_slices.len();
    let mut paths = DMatrix::zeros(d, m);
    for (i, row) in rows.into_iter().enumerate() {
        for (t, r) in row.into_iter().enumerate() {
            paths[(i, t)] = r;
        }
    }
    Ok(paths)
}

/// Hogg tail-ratio kurtosis:
/// ((mean of top 5% - mean of bottom 5%) / (mean of top half - mean of
/// bottom half) - 2.63) * 100. Tail sets take ceil(0.05 n) observations;
/// halves take exactly n/2 (the middle point of an odd-length series is
/// excluded).
pub fn hogg_kurtosis(series: &[f64]) -> Result<f64, PredictiveError> {
    let n = series.len();
    if n < 20 {
        return Err(PredictiveError::SeriesTooShort { min: 20, got: n });
    }
    let mut sorted = series.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n_tail = (0.05 * n as f64).ceil() as usize;
    let n_half = n / 2;
    let top_tail = mean(&sorted[n - n_tail..]);
    let bottom_tail = mean(&sorted[..n_tail]);
    let top_half = mean(&sorted[n - n_half..]);
    let bottom_half = mean(&sorted[..n_half]);
    let denom = top_half - bottom_half;
    if denom <= 0.0 {
        return Err(PredictiveError::ZeroDenominator);
    }
    Ok(((top_tail - bottom_tail) / denom - 2.63) * 100.0)
}

/// Trading periods per year for Sharpe annualization of monthly returns.
pub const PERIODS_PER_YEAR: f64 = 12.0;

/// Statistic labels, in the fixed order used throughout summaries and CSVs.
pub const STAT_NAMES: [&str; 8] = [
    "mean_return",
    "sd_return",
    "sharpe_annualized",
    "median",
    "iqr",
    "skew",
    "hogg_kurtosis",
    "certainty_equivalent",
];

/// Which statistics are return-denominated and therefore reported in
/// percent in output files.
pub const STAT_IN_PERCENT: [bool; 8] = [true, true, false, true, true, false, false, true];

/// Statistics of one return path. Degenerate entries (zero variance, short
/// series, utility out of domain) are None rather than errors so a summary
/// can count and exclude them.
#[derive(Debug, Clone, PartialEq)]
pub struct PathStats {
    pub mean: f64,
    pub sd: f64,
    pub sharpe: Option<f64>,
    pub median: f64,
    pub iqr: f64,
    pub skew: Option<f64>,
    pub hogg_kurtosis: Option<f64>,
    pub certainty_equivalent: Option<f64>,
}

impl PathStats {
    /// Value by `STAT_NAMES` index.
    pub fn get(&self, index: usize) -> Option<f64> {
        match index {
            0 => Some(self.mean),
            1 => Some(self.sd),
            2 => self.sharpe,
            3 => Some(self.median),
            4 => Some(self.iqr),
            5 => self.skew,
            6 => self.hogg_kurtosis,
            7 => self.certainty_equivalent,
            _ => None,
        }
    }
}

/// Statistics of a single path of monthly returns. `rf` is a per-month
/// risk-free series (None means zero). The Sharpe ratio is annualized by
/// sqrt(periods_per_year); the certainty equivalent inverts the mean
/// utility along the path and is pinned to -1 if any month is bankrupt.
pub fn path_stats(
    path: &[f64],
    utility: &UtilitySpec,
    rf: Option<&[f64]>,
    periods_per_year: f64,
) -> Result<PathStats, PredictiveError> {
    let m = path.len();
    if m < 2 {
        return Err(PredictiveError::PathTooShort(m));
    }
    if let Some(rf) = rf {
        if rf.len() != m {
            return Err(PredictiveError::RiskFreeLengthMismatch {
                expected: m,
                got: rf.len(),
            });
        }
    }
    let mean_return = mean(path);
    let sd = sample_variance(path).sqrt();
    let mut sorted = path.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = quantile_sorted(&sorted, 0.5);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let rf_mean = rf.map(mean).unwrap_or(0.0);
    // A constant path's variance only vanishes up to rounding.
    let spread = sd > 1e-12 * mean_return.abs().max(1.0);
    let sharpe = spread.then(|| periods_per_year.sqrt() * (mean_return - rf_mean) / sd);
    let skew = spread.then(|| (mean_return - median) / sd);
    let hogg = hogg_kurtosis(path).ok();
    let certainty = if path.iter().any(|r| 1.0 + r <= 0.0) {
        Some(-1.0)
    } else {
        let eu = path.iter().map(|&r| utility_value(utility, r)).sum::<f64>() / m as f64;
        certainty_equivalent(utility, eu).ok()
    };
    Ok(PathStats {
        mean: mean_return,
        sd,
        sharpe,
        median,
        iqr,
        skew,
        hogg_kurtosis: hogg,
        certainty_equivalent: certainty,
    })
}

/// Posterior location, spread, and quantiles of one statistic across
/// draws, with the count of draws excluded as degenerate.
#[derive(Debug, Clone)]
pub struct StatSummary {
    pub mean: f64,
    pub sd: f64,
    /// Quantiles at 2.5, 25, 50, 75, 97.5 percent.
    pub quantiles: [f64; 5],
    pub excluded: usize,
}

/// Posterior distribution of every path statistic across theta draws.
#[derive(Debug, Clone)]
pub struct StatDistribution {
    /// Aligned with `STAT_NAMES`; None when no draw produced the statistic.
    pub stats: Vec<Option<StatSummary>>,
    pub n_draws: usize,
}

/// Per-draw path statistics reduced to posterior mean, sd, and quantiles
/// per statistic. Draws whose statistic is degenerate are excluded from
/// that statistic with a count.
pub fn predictive_summary(
    paths: &DMatrix<f64>,
    utility: &UtilitySpec,
    rf: Option<&[f64]>,
    periods_per_year: f64,
) -> Result<StatDistribution, PredictiveError> {
    let d = paths.nrows();
    if d < 2 {
        return Err(PredictiveError::TooFewDraws(d));
    }
    let per_draw = |i: usize| -> Result<PathStats, PredictiveError> {
        let path: Vec<f64> = paths.row(i).iter().cloned().collect();
        path_stats(&path, utility, rf, periods_per_year)
    };
    #[cfg(feature = "parallel")]
    let draw_stats: Result<Vec<PathStats>, PredictiveError> =
        (0..d).into_par_iter().map(per_draw).collect();
    #[cfg(not(feature = "parallel"))]
    let draw_stats: Result<Vec<PathStats>, PredictiveError> = (0..d).map(per_draw).collect();
    let draw_stats = draw_stats?;

    let mut stats = Vec::with_capacity(STAT_NAMES.len());
    for idx in 0..STAT_NAMES.len() {
        let values: Vec<f64> = draw_stats.iter().filter_map(|s| s.get(idx)).collect();
        let excluded = d - values.len();
        if values.is_empty() {
            stats.push(None);
            continue;
        }
        let m = mean(&values);
        let sd = if values.len() >= 2 {
            sample_variance(&values).sqrt()
        } else {
            0.0
        };
        let mut sorted = values;
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let quantiles = [
            quantile_sorted(&sorted, 0.025),
            quantile_sorted(&sorted, 0.25),
            quantile_sorted(&sorted, 0.50),
            quantile_sorted(&sorted, 0.75),
            quantile_sorted(&sorted, 0.975),
        ];
        stats.push(Some(StatSummary {
            mean: m,
            sd,
            quantiles,
            excluded,
        }));
    }
    Ok(StatDistribution { stats, n_draws: d })
}

/// Path statistics of the portfolio built from a single coefficient vector
/// (typically the posterior mean).
pub fn decision_path(
    theta: &DVector<f64>,
    oos_slices: &[StandardizedSlice],
    utility: &UtilitySpec,
    rf: Option<&[f64]>,
    periods_per_year: f64,
) -> Result<PathStats, PredictiveError> {
    let window = CompiledWindow::from_slices(oos_slices)?;
    if window.k() != theta.len() {
        return Err(PredictiveError::DimensionMismatch {
            expected: window.k(),
            got: theta.len(),
        });
    }
    let path = window.portfolio_returns(theta);
    path_stats(&path, utility, rf, periods_per_year)
}

/// The full out-of-sample report: posterior distribution of each
/// statistic, the decision-theoretic path, and both benchmark paths.
#[derive(Debug, Clone)]
pub struct PredictiveSummary {
    pub distribution: StatDistribution,
    pub decision_path: PathStats,
    pub benchmark_value_weighted: PathStats,
    pub benchmark_equal_weighted: PathStats,
}

/// Assembles the report from theta draws and out-of-sample slices: paths
/// per draw, summary across draws, decision path from the column means of
/// the draws, value-weighted and equal-weighted benchmark statistics.
pub fn build_predictive_summary(
    theta_draws: &DMatrix<f64>,
    oos_slices: &[StandardizedSlice],
    utility: &UtilitySpec,
    rf: Option<&[f64]>,
    periods_per_year: f64,
) -> Result<PredictiveSummary, PredictiveError> {
    let paths = oos_paths(theta_draws, oos_slices)?;
    let distribution = predictive_summary(&paths, utility, rf, periods_per_year)?;
    let theta_bar = theta_draws.row_mean().transpose();
    let decision = decision_path(&theta_bar, oos_slices, utility, rf, periods_per_year)?;
    let vw_path: Vec<f64> = oos_slices
        .iter()
        .map(|s| s.benchmark_weights.dot(&s.next_returns))
        .collect();
    let ew_path: Vec<f64> = oos_slices
        .iter()
        .map(|s| s.next_returns.sum() / s.n_assets() as f64)
        .collect();
    Ok(PredictiveSummary {
        distribution,
        decision_path: decision,
        benchmark_value_weighted: path_stats(&vw_path, utility, rf, periods_per_year)?,
        benchmark_equal_weighted: path_stats(&ew_path, utility, rf, periods_per_year)?,
    })
}

fn cell(v: Option<f64>, percent: bool) -> String {
    match v {
        Some(x) => fmt_f64(if percent { 100.0 * x } else { x }),
        None => String::new(),
    }
}

/// Summary-table CSV: one row per statistic with posterior mean, sd, the
/// five quantiles, the decision path, and both benchmarks. A `units`
/// column marks the return-denominated rows, which are scaled to percent.
pub fn write_summary_csv(
    summary: &PredictiveSummary,
    path: &Path,
) -> Result<(), PredictiveError> {
    let io_err = |source| PredictiveError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    writeln!(
        out,
        "statistic,units,mean,sd,q2.5,q25,median,q75,q97.5,excluded,decision_path,benchmark_value_weighted,benchmark_equal_weighted"
    )
    .map_err(io_err)?;
    for (idx, name) in STAT_NAMES.iter().enumerate() {
        let percent = STAT_IN_PERCENT[idx];
        let units = if percent { "percent" } else { "ratio" };
        let s = &summary.distribution.stats[idx];
        let (mean_s, sd_s, q, excluded) = match s {
            Some(s) => (
                cell(Some(s.mean), percent),
                cell(Some(s.sd), percent),
                s.quantiles.map(|v| cell(Some(v), percent)),
                s.excluded,
            ),
            None => (
                String::new(),
                String::new(),
                [(); 5].map(|_| String::new()),
                summary.distribution.n_draws,
            ),
        };
        writeln!(
            out,
            "{name},{units},{mean_s},{sd_s},{},{},{},{},{},{excluded},{},{},{}",
            q[0],
            q[1],
            q[2],
            q[3],
            q[4],
            cell(summary.decision_path.get(idx), percent),
            cell(summary.benchmark_value_weighted.get(idx), percent),
            cell(summary.benchmark_equal_weighted.get(idx), percent),
        )
        .map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Gaussian-kernel density comparison of policy returns against a
/// benchmark, on a common grid.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    pub grid: Vec<f64>,
    pub policy_density: Vec<f64>,
    pub benchmark_density: Vec<f64>,
    pub log_density_ratio: Vec<f64>,
}

/// Silverman's rule of thumb: 0.9 min(sd, IQR/1.34) n^{-1/5}.
pub fn silverman_bandwidth(data: &[f64]) -> Result<f64, PredictiveError> {
    if data.len() < 2 {
        return Err(PredictiveError::SeriesTooShort {
            min: 2,
            got: data.len(),
        });
    }
    let sd = sample_variance(data).sqrt();
    let iqr = quantile(data, 0.75) - quantile(data, 0.25);
    let spread = if iqr > 0.0 {
        sd.min(iqr / 1.34)
    } else {
        sd
    };
    if spread <= 0.0 {
        return Err(PredictiveError::DegenerateDensity);
    }
    Ok(0.9 * spread * (data.len() as f64).powf(-0.2))
}

fn gaussian_kde(data: &[f64], bandwidth: f64, grid: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (data.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|&x| {
            let sum: f64 = data
                .iter()
                .map(|&xi| (-0.5 * ((x - xi) / bandwidth).powi(2)).exp())
                .sum();
            (norm * sum).max(1e-300)
        })
        .collect()
}

/// Kernel density estimates of policy and benchmark returns with Silverman
/// bandwidths, on a shared grid spanning both samples.
pub fn density_grid(
    policy_returns: &[f64],
    benchmark_returns: &[f64],
    n_points: usize,
) -> Result<DensityGrid, PredictiveError> {
    let h_policy = silverman_bandwidth(policy_returns)?;
    let h_bench = silverman_bandwidth(benchmark_returns)?;
    let pad = 3.0 * h_policy.max(h_bench);
    let lo = policy_returns
        .iter()
        .chain(benchmark_returns)
        .cloned()
        .fold(f64::INFINITY, f64::min)
        - pad;
    let hi = policy_returns
        .iter()
        .chain(benchmark_returns)
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        + pad;
    let n = n_points.max(2);
    let step = (hi - lo) / (n as f64 - 1.0);
    let grid: Vec<f64> = (0..n).map(|i| lo + i as f64 * step).collect();
    let policy_density = gaussian_kde(policy_returns, h_policy, &grid);
    let benchmark_density = gaussian_kde(benchmark_returns, h_bench, &grid);
    let log_density_ratio = policy_density
        .iter()
        .zip(&benchmark_density)
        .map(|(p, b)| (p / b).ln())
        .collect();
    Ok(DensityGrid {
        grid,
        policy_density,
        benchmark_density,
        log_density_ratio,
    })
}

/// Density-grid CSV with a units header row (returns in decimals).
pub fn write_density_csv(grid: &DensityGrid, path: &Path) -> Result<(), PredictiveError> {
    let io_err = |source| PredictiveError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    writeln!(out, "return,policy_density,benchmark_density,log_density_ratio")
        .map_err(io_err)?;
    for i in 0..grid.grid.len() {
        writeln!(
            out,
            "{},{},{},{}",
            fmt_f64(grid.grid[i]),
            fmt_f64(grid.policy_density[i]),
            fmt_f64(grid.benchmark_density[i]),
            fmt_f64(grid.log_density_ratio[i]),
        )
        .map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}
