//! Deterministic synthetic panels with planted characteristic-return
//! structure: r_{i,t+1} = mu0 + x_i'b + f_t + eps_i with iid standard
//! normal characteristics, a common market factor, and log-normal caps.
//! Ground truth for recovery and frontier tests.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::market::{CharacteristicPanel, DataError, MonthCrossSection};
use nalgebra::DMatrix;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least K+2 = {min} assets; got {got}")]
    TooFewAssets { min: usize, got: usize },
    #[error("need at least 2 months; got {0}")]
    TooFewMonths(usize),
    #[error("noise_sd must be positive; got {0}")]
    BadNoise(f64),
    #[error("market_vol must be non-negative; got {0}")]
    BadMarketVol(f64),
    #[error("signal has {got} entries; K = {expected}")]
    SignalLength { expected: usize, got: usize },
    #[error(transparent)]
    Panel(#[from] DataError),
}

/// Generator configuration. `signal` is the planted linear loading b in
/// r = mu0 + x'b + f + eps.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_assets: usize,
    pub n_months: usize,
    pub k: usize,
    pub signal: Vec<f64>,
    pub noise_sd: f64,
    pub market_vol: f64,
    pub mean_return: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// No planted signal, 5% idiosyncratic and 2% market vol, 1% mean
    /// monthly return.
    pub fn new(n_assets: usize, n_months: usize, k: usize, seed: u64) -> Self {
        SynthConfig {
            n_assets,
            n_months,
            k,
            signal: vec![0.0; k],
            noise_sd: 0.05,
            market_vol: 0.02,
            mean_return: 0.01,
            seed,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.n_assets < self.k + 2 {
            return Err(SynthError::TooFewAssets {
                min: self.k + 2,
                got: self.n_assets,
            });
        }
        if self.n_months < 2 {
            return Err(SynthError::TooFewMonths(self.n_months));
        }
        if !(self.noise_sd > 0.0) {
            return Err(SynthError::BadNoise(self.noise_sd));
        }
        if self.market_vol < 0.0 {
            return Err(SynthError::BadMarketVol(self.market_vol));
        }
        if self.signal.len() != self.k {
            return Err(SynthError::SignalLength {
                expected: self.k,
                got: self.signal.len(),
            });
        }
        Ok(())
    }
}

/// Returns are floored above -0.99: the idiosyncratic shock is redrawn up
/// to this many times, then the return is clamped.
const FLOOR_RETRIES: usize = 8;
const RETURN_FLOOR: f64 = -0.99;

/// Month ids "1960-01", "1960-02", ... so lexicographic order is time order.
fn month_id(t: usize) -> String {
    format!("{:04}-{:02}", 1960 + t / 12, t % 12 + 1)
}

/// Generates the panel. Deterministic given the seed: a single ChaCha
/// stream drawn in a fixed order.
pub fn generate(config: &SynthConfig) -> Result<CharacteristicPanel, SynthError> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let n = config.n_assets;
    let k = config.k;
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut cross_sections = Vec::with_capacity(config.n_months);
    for t in 0..config.n_months {
        let mut characteristics = DMatrix::zeros(n, k);
        for i in 0..n {
            for j in 0..k {
                characteristics[(i, j)] = normal();
            }
        }
        let market_caps: Vec<f64> = (0..n).map(|_| normal().exp()).collect();
        let market_shock = config.market_vol * normal();
        let mut next_returns = Vec::with_capacity(n);
        for i in 0..n {
            let loading: f64 = (0..k)
                .map(|j| characteristics[(i, j)] * config.signal[j])
                .sum();
            let base = config.mean_return + loading + market_shock;
            let mut ret = base + config.noise_sd * normal();
            let mut retries = 0;
            while ret <= RETURN_FLOOR && retries < FLOOR_RETRIES {
                ret = base + config.noise_sd * normal();
                retries += 1;
            }
            if ret <= RETURN_FLOOR {
                ret = RETURN_FLOOR;
            }
            next_returns.push(ret);
        }
        cross_sections.push(MonthCrossSection {
            month: month_id(t),
            asset_ids: (0..n).map(|i| format!("s{i:04}")).collect(),
            characteristics,
            market_caps,
            next_returns,
        });
    }
    let names = (1..=k).map(|j| format!("c{j}")).collect();
    Ok(CharacteristicPanel::from_cross_sections(cross_sections, names)?)
}
