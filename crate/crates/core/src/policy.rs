//! Characteristic-tilt policy: maps a coefficient vector into portfolio
//! weights and returns, and evaluates sample expected utility and certainty
//! equivalents for log, power, and the quadratic test-oracle utilities.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::market::{MonthId, StandardizedSlice};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("power utility requires gamma > 0 and gamma != 1; got {0}")]
    InvalidGamma(f64),
    #[error("quadratic-oracle curvature matrix is not symmetric (max asymmetry {0:.3e})")]
    CurvatureNotSymmetric(f64),
    #[error("quadratic-oracle curvature matrix is not PSD (min eigenvalue {0:.3e})")]
    CurvatureNotPsd(f64),
    #[error("quadratic-oracle dimensions disagree: g has {g} entries, Q is {q_rows}x{q_cols}")]
    OracleDimensionMismatch {
        g: usize,
        q_rows: usize,
        q_cols: usize,
    },
    #[error("dimension mismatch: slice has K={expected} characteristics, theta has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("theta contains non-finite entries")]
    NonFiniteTheta,
    #[error("expected utility over an empty window is undefined")]
    EmptyWindow,
    #[error("certainty equivalent undefined: {0}")]
    CeOutOfDomain(String),
}

/// Utility sentinel for a bankrupt path (some gross return <= 0). The
/// sampler treats a proposal with this value as an automatic rejection.
pub const NEG_INFINITY_UTILITY: f64 = f64::NEG_INFINITY;

/// Investor preferences. `QuadraticOracle` is a test-only utility whose
/// Gibbs posterior is exactly Gaussian, giving the sampler a closed-form
/// target to be checked against.
#[derive(Debug, Clone)]
pub enum UtilitySpec {
    /// U(1+r) = ln(1+r).
    Log,
    /// U(1+r) = (1+r)^(1-gamma) / (1-gamma), gamma > 0, gamma != 1.
    Power { gamma: f64 },
    /// Expected utility over theta directly: g'theta - (gamma/2) theta'Q theta.
    QuadraticOracle {
        mean_gradient: DVector<f64>,
        curvature: DMatrix<f64>,
        gamma: f64,
    },
}

impl UtilitySpec {
    pub fn log() -> Self {
        UtilitySpec::Log
    }

    pub fn power(gamma: f64) -> Result<Self, PolicyError> {
        if !(gamma > 0.0) || gamma == 1.0 || !gamma.is_finite() {
            return Err(PolicyError::InvalidGamma(gamma));
        }
        Ok(UtilitySpec::Power { gamma })
    }

    /// Validates symmetry (1e-12) and positive semidefiniteness
    /// (min eigenvalue >= -1e-10) of the curvature matrix.
    pub fn quadratic_oracle(
        mean_gradient: DVector<f64>,
        curvature: DMatrix<f64>,
        gamma: f64,
    ) -> Result<Self, PolicyError> {
        let k = mean_gradient.len();
        if curvature.nrows() != k || curvature.ncols() != k {
            return Err(PolicyError::OracleDimensionMismatch {
                g: k,
                q_rows: curvature.nrows(),
                q_cols: curvature.ncols(),
            });
        }
        let asym = (&curvature - curvature.transpose()).abs().max();
        if asym > 1e-12 {
            return Err(PolicyError::CurvatureNotSymmetric(asym));
        }
        let min_eig = curvature
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-10 {
            return Err(PolicyError::CurvatureNotPsd(min_eig));
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(PolicyError::InvalidGamma(gamma));
        }
        Ok(UtilitySpec::QuadraticOracle {
            mean_gradient,
            curvature,
            gamma,
        })
    }

    /// Short identifier used in chain sidecars and manifests.
    pub fn id(&self) -> String {
        match self {
            UtilitySpec::Log => "log".to_string(),
            UtilitySpec::Power { gamma } => format!("power(gamma={gamma})"),
            UtilitySpec::QuadraticOracle {
                mean_gradient,
                gamma,
                ..
            } => format!(
                "quadratic-oracle(k={},gamma={gamma})",
                mean_gradient.len()
            ),
        }
    }
}

/// Characteristic tilt coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta(DVector<f64>);

impl Theta {
    pub fn new(coefficients: DVector<f64>) -> Result<Self, PolicyError> {
        if coefficients.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::NonFiniteTheta);
        }
        Ok(Theta(coefficients))
    }

    pub fn from_slice(coefficients: &[f64]) -> Result<Self, PolicyError> {
        Theta::new(DVector::from_column_slice(coefficients))
    }

    pub fn zeros(k: usize) -> Self {
        Theta(DVector::zeros(k))
    }

    pub fn coefficients(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }
}

impl std::ops::Deref for Theta {
    type Target = DVector<f64>;

    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

/// w_i = benchmark_i + (1/N) theta'x_i. The tilt sums to zero because the
/// characteristic columns are zero-mean, so the weights sum to one.
pub fn portfolio_weights(
    slice: &StandardizedSlice,
    theta: &Theta,
) -> Result<DVector<f64>, PolicyError> {
    if slice.k() != theta.k() {
        return Err(PolicyError::DimensionMismatch {
            expected: slice.k(),
            got: theta.k(),
        });
    }
    let n = slice.n_assets() as f64;
    let tilt = &slice.characteristics * theta.coefficients() / n;
    Ok(&slice.benchmark_weights + tilt)
}

/// Next-month portfolio return: the weight vector dotted with next returns.
pub fn portfolio_return(slice: &StandardizedSlice, theta: &Theta) -> Result<f64, PolicyError> {
    let w = portfolio_weights(slice, theta)?;
    Ok(w.dot(&slice.next_returns))
}

/// U(1+r) for the scalar utilities; a gross return at or below zero yields
/// the negative-infinity sentinel. The quadratic oracle's scalar value is
/// its second-order expansion r - (gamma/2) r^2, used only when path
/// statistics are requested under the oracle.
pub fn utility_value(u: &UtilitySpec, net_return: f64) -> f64 {
    let gross = 1.0 + net_return;
    if gross <= 0.0 {
        return NEG_INFINITY_UTILITY;
    }
    match u {
        UtilitySpec::Log => gross.ln(),
        UtilitySpec::Power { gamma } => gross.powf(1.0 - gamma) / (1.0 - gamma),
        UtilitySpec::QuadraticOracle { gamma, .. } => {
            net_return - 0.5 * gamma * net_return * net_return
        }
    }
}

/// Equal-weight average of U(1 + r_p,t) over the window; negative infinity
/// if any month is bankrupt. The quadratic oracle ignores the slices and
/// returns g'theta - (gamma/2) theta'Q theta.
pub fn sample_expected_utility(
    slices: &[StandardizedSlice],
    theta: &Theta,
    u: &UtilitySpec,
) -> Result<f64, PolicyError> {
    if slices.is_empty() {
        return Err(PolicyError::EmptyWindow);
    }
    if let UtilitySpec::QuadraticOracle {
        mean_gradient,
        curvature,
        gamma,
    } = u
    {
        return oracle_utility(mean_gradient, curvature, *gamma, theta.coefficients());
    }
    let mut total = 0.0;
    for slice in slices {
        let v = utility_value(u, portfolio_return(slice, theta)?);
        if v == NEG_INFINITY_UTILITY {
            return Ok(NEG_INFINITY_UTILITY);
        }
        total += v;
    }
    Ok(total / slices.len() as f64)
}

fn oracle_utility(
    g: &DVector<f64>,
    q: &DMatrix<f64>,
    gamma: f64,
    theta: &DVector<f64>,
) -> Result<f64, PolicyError> {
    if theta.len() != g.len() {
        return Err(PolicyError::DimensionMismatch {
            expected: g.len(),
            got: theta.len(),
        });
    }
    Ok(g.dot(theta) - 0.5 * gamma * theta.dot(&(q * theta)))
}

/// Inverts the utility: the sure net return whose utility equals
/// `expected_utility`. A negative-infinity expected utility maps to the
/// boundary value -1.
pub fn certainty_equivalent(u: &UtilitySpec, expected_utility: f64) -> Result<f64, PolicyError> {
    if expected_utility == NEG_INFINITY_UTILITY {
        return Ok(-1.0);
    }
    match u {
        UtilitySpec::Log => Ok(expected_utility.exp() - 1.0),
        UtilitySpec::Power { gamma } => {
            let base = (1.0 - gamma) * expected_utility;
            if base <= 0.0 {
                return Err(PolicyError::CeOutOfDomain(format!(
                    "(1-gamma)*EU = {base} must be positive for power utility"
                )));
            }
            Ok(base.powf(1.0 / (1.0 - gamma)) - 1.0)
        }
        UtilitySpec::QuadraticOracle { gamma, .. } => {
            // Invert r - (gamma/2) r^2 on its increasing branch (r < 1/gamma).
            let disc = 1.0 - 2.0 * gamma * expected_utility;
            if disc < 0.0 {
                return Err(PolicyError::CeOutOfDomain(format!(
                    "expected utility {expected_utility} exceeds the quadratic maximum"
                )));
            }
            Ok((1.0 - disc.sqrt()) / gamma)
        }
    }
}

/// A window reduced to what the policy return needs per month: the
/// benchmark return and the K-vector X'r/N. Exact for the tilt rule
/// because weights are affine in theta:
/// r_p(theta) = benchmark_return + theta' (X'r / N).
#[derive(Debug, Clone)]
pub struct CompiledWindow {
    window_id: String,
    months: Vec<MonthId>,
    bench_returns: Vec<f64>,
    tilt_returns: Vec<DVector<f64>>,
    k: usize,
}

impl CompiledWindow {
    pub fn from_slices(slices: &[StandardizedSlice]) -> Result<Self, PolicyError> {
        if slices.is_empty() {
            return Err(PolicyError::EmptyWindow);
        }
        let k = slices[0].k();
        let mut months = Vec::with_capacity(slices.len());
        let mut bench_returns = Vec::with_capacity(slices.len());
        let mut tilt_returns = Vec::with_capacity(slices.len());
        for slice in slices {
            if slice.k() != k {
                return Err(PolicyError::DimensionMismatch {
                    expected: k,
                    got: slice.k(),
                });
            }
            let n = slice.n_assets() as f64;
            months.push(slice.month.clone());
            bench_returns.push(slice.benchmark_weights.dot(&slice.next_returns));
            tilt_returns.push(slice.characteristics.transpose() * &slice.next_returns / n);
        }
        let window_id = format!(
            "{}:{}",
            months.first().unwrap(),
            months.last().unwrap()
        );
        Ok(CompiledWindow {
            window_id,
            months,
            bench_returns,
            tilt_returns,
            k,
        })
    }

    /// A month-less window for sampling the quadratic oracle, whose
    /// expected utility never touches the data.
    pub fn oracle(k: usize) -> Self {
        CompiledWindow {
            window_id: format!("oracle(k={k})"),
            months: Vec::new(),
            bench_returns: Vec::new(),
            tilt_returns: Vec::new(),
            k,
        }
    }

    pub fn window_id(&self) -> &str {
        &self.window_id
    }

    pub fn months(&self) -> &[MonthId] {
        &self.months
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.months.len()
    }

    pub fn is_empty(&self) -> bool {
        self.months.is_empty()
    }

    pub fn benchmark_returns(&self) -> &[f64] {
        &self.bench_returns
    }

    /// Per-month policy returns for the given coefficients.
    pub fn portfolio_returns(&self, theta: &DVector<f64>) -> Vec<f64> {
        self.bench_returns
            .iter()
            .zip(&self.tilt_returns)
            .map(|(b, s)| b + theta.dot(s))
            .collect()
    }

    /// Sample expected utility through the compiled representation; agrees
    /// with `sample_expected_utility` on the originating slices.
    pub fn expected_utility(&self, theta: &DVector<f64>, u: &UtilitySpec) -> f64 {
        if let UtilitySpec::QuadraticOracle {
            mean_gradient,
            curvature,
            gamma,
        } = u
        {
            return mean_gradient.dot(theta) - 0.5 * gamma * theta.dot(&(curvature * theta));
        }
        debug_assert!(!self.is_empty(), "scalar utilities need a nonempty window");
        let mut total = 0.0;
        for (b, s) in self.bench_returns.iter().zip(&self.tilt_returns) {
            let v = utility_value(u, b + theta.dot(s));
            if v == NEG_INFINITY_UTILITY {
                return NEG_INFINITY_UTILITY;
            }
            total += v;
        }
        total / self.months.len() as f64
    }
}
