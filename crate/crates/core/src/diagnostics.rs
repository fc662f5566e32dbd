//! Convergence and efficiency diagnostics: the multivariate potential
//! scale reduction factor across independent chains, autocorrelation-based
//! effective sample sizes, per-coordinate acceptance rates, and posterior
//! correlations.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampler::Chain;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("MPSRF needs at least two chains; got {0}")]
    TooFewChains(usize),
    #[error("MPSRF needs common length n >= K+1; got n = {n}, K = {k}")]
    TooFewDraws { n: usize, k: usize },
    #[error("chains disagree on dimension: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("within-chain covariance is singular")]
    SingularWithinCovariance,
    #[error("effective sample size needs at least 10 draws; got {0}")]
    SeriesTooShort(usize),
    #[error("series has zero variance")]
    ZeroVariance,
    #[error("coordinate {0} has zero variance")]
    ZeroVarianceCoordinate(usize),
    #[error("no proposals recorded for coordinate {0}")]
    NoProposals(usize),
    #[error("correlations need at least two draws; got {0}")]
    TooFewCorrelationDraws(usize),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("serialization failed: {0}")]
    Serialize(String),
}

/// Multivariate potential scale reduction factor over m >= 2 chains,
/// truncated to the length of the shortest:
/// sqrt((n-1)/n + (m+1)/(mn) * lambda_max(W^{-1} B)).
pub fn mpsrf(draw_sets: &[&DMatrix<f64>]) -> Result<f64, DiagnosticsError> {
    let m = draw_sets.len();
    if m < 2 {
        return Err(DiagnosticsError::TooFewChains(m));
    }
    let k = draw_sets[0].ncols();
    for d in draw_sets {
        if d.ncols() != k {
            return Err(DiagnosticsError::DimensionMismatch(k, d.ncols()));
        }
    }
    let n = draw_sets.iter().map(|d| d.nrows()).min().unwrap();
    if n < k + 1 {
        return Err(DiagnosticsError::TooFewDraws { n, k });
    }

    let mut means: Vec<DVector<f64>> = Vec::with_capacity(m);
    let mut within = DMatrix::zeros(k, k);
    for d in draw_sets {
        let rows = d.rows(0, n);
        let mean = rows.row_mean().transpose();
        let mut cov = DMatrix::zeros(k, k);
        for row in rows.row_iter() {
            let diff = row.transpose() - &mean;
            cov.ger(1.0, &diff, &diff, 1.0);
        }
        cov /= n as f64 - 1.0;
        within += cov;
        means.push(mean);
    }
    within /= m as f64;

    let grand = means.iter().fold(DVector::zeros(k), |acc, v| acc + v) / m as f64;
    let mut between = DMatrix::zeros(k, k);
    for mean in &means {
        let diff = mean - &grand;
        between.ger(1.0, &diff, &diff, 1.0);
    }
    between *= n as f64 / (m as f64 - 1.0);

    // lambda_max(W^{-1} B) through the Cholesky factor of W, keeping the
    // eigenproblem symmetric.
    let within_sym = (&within + within.transpose()) * 0.5;
    let chol =
        Cholesky::new(within_sym).ok_or(DiagnosticsError::SingularWithinCovariance)?;
    let l = chol.l();
    let linv_b = l
        .solve_lower_triangular(&between)
        .ok_or(DiagnosticsError::SingularWithinCovariance)?;
    let linv_b_linv_t = l
        .solve_lower_triangular(&linv_b.transpose())
        .ok_or(DiagnosticsError::SingularWithinCovariance)?;
    let sym = (&linv_b_linv_t + linv_b_linv_t.transpose()) * 0.5;
    let lambda_max = sym
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0);

    let n = n as f64;
    let m = m as f64;
    Ok(((n - 1.0) / n + (m + 1.0) / (m * n) * lambda_max).sqrt())
}

/// N / (1 + sum of leading positive autocorrelations), truncated at the
/// first non-positive one and capped at N. Autocorrelations use the biased
/// 1/N normalization.
pub fn effective_sample_size(series: &[f64]) -> Result<f64, DiagnosticsError> {
    let n = series.len();
    if n < 10 {
        return Err(DiagnosticsError::SeriesTooShort(n));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let c0 = series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    if c0 <= 0.0 || !c0.is_finite() {
        return Err(DiagnosticsError::ZeroVariance);
    }
    let mut rho_sum = 0.0;
    for lag in 1..n {
        let c: f64 = series
            .iter()
            .zip(&series[lag..])
            .map(|(a, b)| (a - mean) * (b - mean))
            .sum::<f64>()
            / n as f64;
        let rho = c / c0;
        if rho <= 0.0 {
            break;
        }
        rho_sum += rho;
    }
    Ok((n as f64 / (1.0 + rho_sum)).min(n as f64))
}

/// Accepted over proposed, per coordinate.
pub fn acceptance_rates(chain: &Chain) -> Result<Vec<f64>, DiagnosticsError> {
    chain
        .proposal_counts
        .iter()
        .zip(&chain.accept_counts)
        .enumerate()
        .map(|(j, (&p, &a))| {
            if p == 0 {
                Err(DiagnosticsError::NoProposals(j))
            } else {
                Ok(a as f64 / p as f64)
            }
        })
        .collect()
}

/// Pearson correlation matrix of the draw columns.
pub fn posterior_correlations(draws: &DMatrix<f64>) -> Result<DMatrix<f64>, DiagnosticsError> {
    let d = draws.nrows();
    let k = draws.ncols();
    if d < 2 {
        return Err(DiagnosticsError::TooFewCorrelationDraws(d));
    }
    let means = draws.row_mean();
    let mut centered = draws.clone();
    for mut row in centered.row_iter_mut() {
        row -= &means;
    }
    let mut sds = Vec::with_capacity(k);
    for j in 0..k {
        let ss = centered.column(j).norm_squared();
        if ss <= 0.0 {
            return Err(DiagnosticsError::ZeroVarianceCoordinate(j));
        }
        sds.push(ss.sqrt());
    }
    let mut corr = DMatrix::identity(k, k);
    for i in 0..k {
        for j in i + 1..k {
            let c = centered.column(i).dot(&centered.column(j)) / (sds[i] * sds[j]);
            corr[(i, j)] = c;
            corr[(j, i)] = c;
        }
    }
    Ok(corr)
}

/// Per-chain diagnostics block of the JSON report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub lambda: f64,
    pub seed: u64,
    /// Effective sample size per theta coordinate.
    pub ess: Vec<f64>,
    pub acceptance_rates: Vec<f64>,
    pub correlations: Vec<Vec<f64>>,
}

/// Diagnostics keyed by chain id, with the MPSRF across chains when at
/// least two are given.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub mpsrf: Option<f64>,
    pub chains: BTreeMap<String, ChainDiagnostics>,
}

/// Runs every diagnostic this module offers over a set of chains.
pub fn diagnose(chains: &[(String, &Chain)]) -> Result<DiagnosticsReport, DiagnosticsError> {
    let mpsrf_value = if chains.len() >= 2 {
        let sets: Vec<&DMatrix<f64>> = chains.iter().map(|(_, c)| &c.draws).collect();
        Some(mpsrf(&sets)?)
    } else {
        None
    };
    let mut by_id = BTreeMap::new();
    for (id, chain) in chains {
        let k = chain.k();
        let mut ess = Vec::with_capacity(k);
        for j in 0..k {
            ess.push(effective_sample_size(&chain.coordinate(j))?);
        }
        let corr = posterior_correlations(&chain.draws)?;
        by_id.insert(
            id.clone(),
            ChainDiagnostics {
                lambda: chain.lambda,
                seed: chain.seed,
                ess,
                acceptance_rates: acceptance_rates(chain)?,
                correlations: (0..k)
                    .map(|i| corr.row(i).iter().cloned().collect())
                    .collect(),
            },
        );
    }
    Ok(DiagnosticsReport {
        mpsrf: mpsrf_value,
        chains: by_id,
    })
}

/// Writes the report as pretty JSON.
pub fn write_report_json(
    report: &DiagnosticsReport,
    path: &Path,
) -> Result<(), DiagnosticsError> {
    let file = File::create(path).map_err(|source| DiagnosticsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::to_writer_pretty(BufWriter::new(file), report)
        .map_err(|e| DiagnosticsError::Serialize(e.to_string()))
}
