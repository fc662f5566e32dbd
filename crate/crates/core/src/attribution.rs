//! Factor attribution of out-of-sample portfolio returns: OLS projection
//! on factor returns, Newey-West HAC t-statistics, per-factor variance
//! shares (covariances deliberately ignored, so shares may exceed one in
//! total), and the posterior of all of these across theta draws.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::market::fmt_f64;
use crate::predictive::StatSummary;
use crate::stats::{mean, quantile_sorted, sample_variance};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("need at least F+2 = {min} observations for {f} factors; got {got}")]
    TooFewObservations { min: usize, f: usize, got: usize },
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("returns have {got} months; factors have {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("portfolio variance is zero; shares undefined")]
    ZeroPortfolioVariance,
    #[error("posterior attribution needs at least two draws; got {0}")]
    TooFewDraws(usize),
    #[error("no draw produced a valid regression")]
    NoValidDraws,
    #[error("factor file misses required column `{0}`")]
    MissingColumn(String),
    #[error("factor file line {line}: `{value}` is not a finite number")]
    NonFinite { line: u64, value: String },
    #[error("factor panel does not cover month {0}")]
    MonthNotCovered(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error at line {line}: {source}")]
    Csv { line: u64, source: csv::Error },
}

/// Monthly factor returns and the risk-free series, aligned by month id.
#[derive(Debug, Clone)]
pub struct FactorPanel {
    pub months: Vec<String>,
    pub factor_names: Vec<String>,
    /// M x F, decimals.
    pub factor_returns: DMatrix<f64>,
    pub risk_free: Vec<f64>,
}

impl FactorPanel {
    /// Restriction to the given months, in their order.
    pub fn aligned_to(&self, months: &[String]) -> Result<FactorPanel, AttributionError> {
        let mut rows = Vec::with_capacity(months.len());
        for month in months {
            let idx = self
                .months
                .iter()
                .position(|m| m == month)
                .ok_or_else(|| AttributionError::MonthNotCovered(month.clone()))?;
            rows.push(idx);
        }
        let f = self.factor_names.len();
        let mut factor_returns = DMatrix::zeros(rows.len(), f);
        let mut risk_free = Vec::with_capacity(rows.len());
        for (out, &src) in rows.iter().enumerate() {
            for j in 0..f {
                factor_returns[(out, j)] = self.factor_returns[(src, j)];
            }
            risk_free.push(self.risk_free[src]);
        }
        Ok(FactorPanel {
            months: months.to_vec(),
            factor_names: self.factor_names.clone(),
            factor_returns,
            risk_free,
        })
    }
}

/// Loads a factor CSV: header `month,rf,<factor columns...>`, decimals.
pub fn load_factor_panel(path: &Path) -> Result<FactorPanel, AttributionError> {
    let file = File::open(path).map_err(|source| AttributionError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| AttributionError::Csv { line: 1, source: e })?
        .clone();
    let month_col = headers
        .iter()
        .position(|h| h == "month")
        .ok_or_else(|| AttributionError::MissingColumn("month".into()))?;
    let rf_col = headers
        .iter()
        .position(|h| h == "rf")
        .ok_or_else(|| AttributionError::MissingColumn("rf".into()))?;
    let factor_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != month_col && *i != rf_col)
        .map(|(i, name)| (i, name.to_string()))
        .collect();

    let mut months = Vec::new();
    let mut risk_free = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx as u64 + 2;
        let record = record.map_err(|e| AttributionError::Csv { line, source: e })?;
        let parse = |raw: &str| -> Result<f64, AttributionError> {
            let v: f64 = raw
                .trim()
                .parse()
                .map_err(|_| AttributionError::NonFinite {
                    line,
                    value: raw.to_string(),
                })?;
            if !v.is_finite() {
                return Err(AttributionError::NonFinite {
                    line,
                    value: raw.to_string(),
                });
            }
            Ok(v)
        };
        months.push(record.get(month_col).unwrap_or("").trim().to_string());
        risk_free.push(parse(record.get(rf_col).unwrap_or(""))?);
        for (col, _) in &factor_cols {
            values.push(parse(record.get(*col).unwrap_or(""))?);
        }
    }
    let f = factor_cols.len();
    let m = months.len();
    Ok(FactorPanel {
        months,
        factor_names: factor_cols.into_iter().map(|(_, n)| n).collect(),
        factor_returns: DMatrix::from_row_slice(m, f, &values),
        risk_free,
    })
}

/// Least-squares projection of excess returns on an intercept plus the
/// factor columns.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub alpha: f64,
    pub betas: Vec<f64>,
    pub residuals: DVector<f64>,
    dependent: DVector<f64>,
    design: DMatrix<f64>,
    xtx_inv: DMatrix<f64>,
}

impl OlsFit {
    /// Coefficients as [alpha, beta_1, ..., beta_F].
    pub fn coefficients(&self) -> Vec<f64> {
        let mut c = Vec::with_capacity(1 + self.betas.len());
        c.push(self.alpha);
        c.extend_from_slice(&self.betas);
        c
    }
}

/// OLS of `excess_returns` on the factors with an intercept. Requires
/// M >= F + 2 and a full-rank design.
pub fn ols_fit(excess_returns: &[f64], factors: &DMatrix<f64>) -> Result<OlsFit, AttributionError> {
    let m = factors.nrows();
    let f = factors.ncols();
    if excess_returns.len() != m {
        return Err(AttributionError::LengthMismatch {
            expected: m,
            got: excess_returns.len(),
        });
    }
    if m < f + 2 {
        return Err(AttributionError::TooFewObservations {
            min: f + 2,
            f,
            got: m,
        });
    }
    let mut design = DMatrix::zeros(m, f + 1);
    design.column_mut(0).fill(1.0);
    design.columns_mut(1, f).copy_from(factors);
    let xtx = design.transpose() * &design;
    let chol = Cholesky::new(xtx).ok_or(AttributionError::RankDeficient)?;
    let y = DVector::from_column_slice(excess_returns);
    let xty = design.transpose() * &y;
    let coef = chol.solve(&xty);
    let residuals = &y - &design * &coef;
    let xtx_inv = chol.solve(&DMatrix::identity(f + 1, f + 1));
    Ok(OlsFit {
        alpha: coef[0],
        betas: coef.iter().skip(1).cloned().collect(),
        residuals,
        dependent: y,
        design,
        xtx_inv,
    })
}

/// Newey-West lag rule of thumb: floor(4 (M/100)^{2/9}).
pub fn default_hac_lag(m: usize) -> usize {
    (4.0 * (m as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize
}

/// Heteroskedasticity-and-autocorrelation-consistent t-statistics with
/// Bartlett weights at the given lag; lag 0 reduces to the White sandwich.
/// A coefficient whose HAC standard error vanishes (perfect fit) reports
/// None.
pub fn hac_tstats(fit: &OlsFit, lag: usize) -> Result<Vec<Option<f64>>, AttributionError> {
    let m = fit.design.nrows();
    let p = fit.design.ncols();
    // Moment series u_t = x_t * e_t.
    let mut u = DMatrix::zeros(m, p);
    for t in 0..m {
        let e = fit.residuals[t];
        for j in 0..p {
            u[(t, j)] = fit.design[(t, j)] * e;
        }
    }
    let mut s = DMatrix::zeros(p, p);
    for t in 0..m {
        let row = u.row(t).transpose();
        s.ger(1.0, &row, &row, 1.0);
    }
    let max_lag = lag.min(m.saturating_sub(1));
    for l in 1..=max_lag {
        let w = 1.0 - l as f64 / (max_lag as f64 + 1.0);
        let mut gamma = DMatrix::zeros(p, p);
        for t in l..m {
            let a = u.row(t).transpose();
            let b = u.row(t - l).transpose();
            gamma.ger(1.0, &a, &b, 1.0);
        }
        s += (&gamma + gamma.transpose()) * w;
    }
    // Var(b) = (X'X)^{-1} (sum_t u u' with lags) (X'X)^{-1}.
    let cov = &fit.xtx_inv * s * &fit.xtx_inv;
    let coef = fit.coefficients();
    Ok(coef
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let var = cov[(j, j)];
            (var > 1e-300).then(|| c / var.sqrt())
        })
        .collect())
}

/// Per-source variance shares of the fitted portfolio returns.
#[derive(Debug, Clone)]
pub struct VarianceShares {
    /// beta_f^2 Var(F_f) / Var(r), per factor.
    pub factor_shares: Vec<f64>,
    /// Var(residual) / Var(r); absorbs alpha and everything off-factor.
    pub residual_share: f64,
}

/// Variance attribution that ignores covariance terms, so the shares may
/// sum above one.
pub fn variance_shares(
    fit: &OlsFit,
    factors: &DMatrix<f64>,
) -> Result<VarianceShares, AttributionError> {
    let port_var = sample_variance(fit.dependent.as_slice());
    if port_var <= 0.0 {
        return Err(AttributionError::ZeroPortfolioVariance);
    }
    let factor_shares = fit
        .betas
        .iter()
        .enumerate()
        .map(|(j, b)| {
            let col: Vec<f64> = factors.column(j).iter().cloned().collect();
            b * b * sample_variance(&col) / port_var
        })
        .collect();
    let residual_share = sample_variance(fit.residuals.as_slice()) / port_var;
    Ok(VarianceShares {
        factor_shares,
        residual_share,
    })
}

/// Posterior distribution of the regression across draws, plus the
/// decision-path regression (coefficients equal the posterior means by
/// linearity) with its HAC t-statistics.
#[derive(Debug, Clone)]
pub struct PosteriorAttribution {
    /// [alpha, beta_1..beta_F], posterior across draws.
    pub coefficients: Vec<StatSummary>,
    /// [residual share, factor shares...], posterior across draws.
    pub shares: Vec<StatSummary>,
    pub decision_coefficients: Vec<f64>,
    pub decision_tstats: Vec<Option<f64>>,
    pub decision_shares: VarianceShares,
    pub hac_lag: usize,
    /// Draws excluded because their regression or shares were degenerate.
    pub excluded: usize,
}

fn summarize(values: &[f64], excluded: usize) -> StatSummary {
    let m = mean(values);
    let sd = if values.len() >= 2 {
        sample_variance(values).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    StatSummary {
        mean: m,
        sd,
        quantiles: [
            quantile_sorted(&sorted, 0.025),
            quantile_sorted(&sorted, 0.25),
            quantile_sorted(&sorted, 0.50),
            quantile_sorted(&sorted, 0.75),
            quantile_sorted(&sorted, 0.975),
        ],
        excluded,
    }
}

/// Regresses every draw's out-of-sample excess path on the factors and
/// summarizes coefficients and variance shares across draws.
pub fn posterior_attribution(
    paths: &DMatrix<f64>,
    factors: &DMatrix<f64>,
    rf: &[f64],
    lag: usize,
) -> Result<PosteriorAttribution, AttributionError> {
    let d = paths.nrows();
    if d < 2 {
        return Err(AttributionError::TooFewDraws(d));
    }
    if paths.ncols() != factors.nrows() || rf.len() != factors.nrows() {
        return Err(AttributionError::LengthMismatch {
            expected: factors.nrows(),
            got: paths.ncols().min(rf.len()),
        });
    }
    let f = factors.ncols();
    let run_one = |i: usize| -> Option<(Vec<f64>, Vec<f64>)> {
        let excess: Vec<f64> = paths
            .row(i)
            .iter()
            .zip(rf)
            .map(|(r, rf)| r - rf)
            .collect();
        let fit = ols_fit(&excess, factors).ok()?;
        let shares = variance_shares(&fit, factors).ok()?;
        let mut share_vec = Vec::with_capacity(f + 1);
        share_vec.push(shares.residual_share);
        share_vec.extend_from_slice(&shares.factor_shares);
        Some((fit.coefficients(), share_vec))
    };
    #[cfg(feature = "parallel")]
    let per_draw: Vec<Option<(Vec<f64>, Vec<f64>)>> =
        (0..d).into_par_iter().map(run_one).collect();
    #[cfg(not(feature = "parallel"))]
    let per_draw: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..d).map(run_one).collect();

    let valid: Vec<&(Vec<f64>, Vec<f64>)> = per_draw.iter().flatten().collect();
    let excluded = d - valid.len();
    if valid.is_empty() {
        return Err(AttributionError::NoValidDraws);
    }
    let coefficients = (0..f + 1)
        .map(|j| {
            let vals: Vec<f64> = valid.iter().map(|(c, _)| c[j]).collect();
            summarize(&vals, excluded)
        })
        .collect();
    let shares = (0..f + 1)
        .map(|j| {
            let vals: Vec<f64> = valid.iter().map(|(_, s)| s[j]).collect();
            summarize(&vals, excluded)
        })
        .collect();

    // Decision path: the regression of the mean path. OLS is linear in the
    // dependent variable, so these coefficients equal the posterior means.
    let mean_path = paths.row_mean();
    let mean_excess: Vec<f64> = mean_path.iter().zip(rf).map(|(r, rf)| r - rf).collect();
    let decision_fit = ols_fit(&mean_excess, factors)?;
    let decision_tstats = hac_tstats(&decision_fit, lag)?;
    let decision_shares = variance_shares(&decision_fit, factors)?;
    Ok(PosteriorAttribution {
        coefficients,
        shares,
        decision_coefficients: decision_fit.coefficients(),
        decision_tstats,
        decision_shares,
        hac_lag: lag,
        excluded,
    })
}

/// Attribution CSV: one row per coefficient (alpha first, then factors),
/// with posterior summary columns, the decision-path estimate, its HAC t,
/// and variance shares.
pub fn write_attribution_csv(
    attribution: &PosteriorAttribution,
    factor_names: &[String],
    path: &Path,
) -> Result<(), AttributionError> {
    let io_err = |source| AttributionError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    writeln!(
        out,
        "source,mean,sd,q2.5,q25,median,q75,q97.5,decision_estimate,decision_hac_t,variance_share,excluded"
    )
    .map_err(io_err)?;
    let mut names = vec!["alpha".to_string()];
    names.extend(factor_names.iter().cloned());
    for (j, name) in names.iter().enumerate() {
        let c = &attribution.coefficients[j];
        let share = if j == 0 {
            attribution.decision_shares.residual_share
        } else {
            attribution.decision_shares.factor_shares[j - 1]
        };
        let tcell = attribution.decision_tstats[j]
            .map(fmt_f64)
            .unwrap_or_default();
        writeln!(
            out,
            "{name},{},{},{},{},{},{},{},{},{tcell},{},{}",
            fmt_f64(c.mean),
            fmt_f64(c.sd),
            fmt_f64(c.quantiles[0]),
            fmt_f64(c.quantiles[1]),
            fmt_f64(c.quantiles[2]),
            fmt_f64(c.quantiles[3]),
            fmt_f64(c.quantiles[4]),
            fmt_f64(attribution.decision_coefficients[j]),
            fmt_f64(share),
            c.excluded,
        )
        .map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}
