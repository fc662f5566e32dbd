//! Run configuration: one TOML file drives the whole pipeline. Every
//! default is stated on the field so `--help` and the README can point
//! here.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ppp_gibbs::market::PanelSchema;
use ppp_gibbs::policy::UtilitySpec;
use ppp_gibbs::sampler::{CalibrationConfig, PriorSpec, ProposalSpec, SamplerConfig};
use ppp_gibbs::synth::SynthConfig;

use crate::CliError;

fn default_seed() -> u64 {
    42
}

fn default_oos_horizon() -> usize {
    12
}

fn default_burn_in() -> usize {
    20_000
}

fn default_keep() -> usize {
    50_000
}

fn default_chains() -> usize {
    2
}

fn default_alpha() -> f64 {
    ppp_gibbs::sampler::DEFAULT_PROPOSAL_ALPHA
}

fn default_initial_scale() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

fn default_band() -> [f64; 2] {
    [0.35, 0.6]
}

fn default_pilot_sweeps() -> usize {
    5_000
}

fn default_max_rounds() -> usize {
    20
}

fn default_grid() -> Vec<f64> {
    ppp_gibbs::frontier::DEFAULT_LAMBDA_GRID.to_vec()
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_density_points() -> usize {
    201
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PanelConfig {
    pub path: PathBuf,
    pub schema: PanelSchema,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtilityConfig {
    /// "log" or "power".
    pub kind: String,
    /// Relative risk aversion; required for power utility.
    pub gamma: Option<f64>,
}

impl UtilityConfig {
    pub fn build(&self) -> Result<UtilitySpec, CliError> {
        match self.kind.as_str() {
            "log" => Ok(UtilitySpec::Log),
            "power" => {
                let gamma = self
                    .gamma
                    .ok_or_else(|| CliError::config("power utility requires `utility.gamma`"))?;
                UtilitySpec::power(gamma)
                    .map_err(|e| CliError::config(format!("invalid utility: {e}")))
            }
            other => Err(CliError::config(format!(
                "unknown utility kind `{other}`; expected `log` or `power`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PriorConfig {
    /// Defaults to the zero vector.
    pub mean: Option<Vec<f64>>,
    /// Row-major covariance; defaults to the identity.
    pub covariance: Option<Vec<Vec<f64>>>,
}

impl PriorConfig {
    pub fn build(&self, k: usize) -> Result<PriorSpec, CliError> {
        let mean = match &self.mean {
            Some(m) => {
                if m.len() != k {
                    return Err(CliError::config(format!(
                        "prior.mean has {} entries; panel has K = {k}",
                        m.len()
                    )));
                }
                nalgebra::DVector::from_column_slice(m)
            }
            None => nalgebra::DVector::zeros(k),
        };
        let covariance = match &self.covariance {
            Some(rows) => {
                if rows.len() != k || rows.iter().any(|r| r.len() != k) {
                    return Err(CliError::config(format!(
                        "prior.covariance must be {k}x{k}"
                    )));
                }
                let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
                nalgebra::DMatrix::from_row_slice(k, k, &flat)
            }
            None => nalgebra::DMatrix::identity(k, k),
        };
        PriorSpec::new(mean, covariance)
            .map_err(|e| CliError::config(format!("invalid prior: {e}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProposalConfig {
    /// Stability exponent of the stable proposal density. Default 1.75.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Per-coordinate scales; `initial_scale` is broadcast when absent.
    pub scales: Option<Vec<f64>>,
    /// Starting scale for every coordinate. Default 0.5.
    #[serde(default = "default_initial_scale")]
    pub initial_scale: f64,
    /// Pilot-calibrate scales per lambda before the production chain.
    /// Default true.
    #[serde(default = "default_true")]
    pub calibrate: bool,
    /// Target acceptance band. Default [0.35, 0.6].
    #[serde(default = "default_band")]
    pub band: [f64; 2],
    /// Sweeps per calibration pilot. Default 5000.
    #[serde(default = "default_pilot_sweeps")]
    pub pilot_sweeps: usize,
    /// Calibration round budget. Default 20.
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            alpha: default_alpha(),
            scales: None,
            initial_scale: default_initial_scale(),
            calibrate: true,
            band: default_band(),
            pilot_sweeps: default_pilot_sweeps(),
            max_rounds: default_max_rounds(),
        }
    }
}

impl ProposalConfig {
    pub fn build(&self, k: usize) -> Result<ProposalSpec, CliError> {
        let scales = match &self.scales {
            Some(s) => {
                if s.len() != k {
                    return Err(CliError::config(format!(
                        "proposal.scales has {} entries; panel has K = {k}",
                        s.len()
                    )));
                }
                s.clone()
            }
            None => vec![self.initial_scale; k],
        };
        ProposalSpec::new(self.alpha, scales)
            .map_err(|e| CliError::config(format!("invalid proposal: {e}")))
    }

    pub fn calibration(&self) -> Option<CalibrationConfig> {
        self.calibrate.then_some(CalibrationConfig {
            band_low: self.band[0],
            band_high: self.band[1],
            pilot_sweeps: self.pilot_sweeps,
            max_rounds: self.max_rounds,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerSection {
    /// Sweeps discarded before recording. Default 20000.
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    /// Post burn-in sweeps kept. Default 50000.
    #[serde(default = "default_keep")]
    pub keep: usize,
    /// Independent chains at lambda-star (>= 2 enables MPSRF). Default 2.
    #[serde(default = "default_chains")]
    pub chains: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            burn_in: default_burn_in(),
            keep: default_keep(),
            chains: default_chains(),
        }
    }
}

impl SamplerSection {
    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            burn_in: self.burn_in,
            keep: self.keep,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaConfig {
    /// Strictly increasing, positive. Defaults to the built-in grid
    /// spanning 500 through 100000.
    #[serde(default = "default_grid")]
    pub grid: Vec<f64>,
}

impl Default for LambdaConfig {
    fn default() -> Self {
        LambdaConfig {
            grid: default_grid(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowsConfig {
    /// Months per estimation window.
    pub length: usize,
    /// Window end months (each gets its own sweep and reports).
    pub end_months: Vec<String>,
    /// Out-of-sample months following each window end. Default 12.
    #[serde(default = "default_oos_horizon")]
    pub oos_horizon: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorsConfig {
    pub path: PathBuf,
    /// Newey-West lag; defaults to floor(4 (M/100)^(2/9)).
    pub hac_lag: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSection {
    pub n_assets: usize,
    pub n_months: usize,
    pub k: usize,
    /// Planted loading b; defaults to zeros.
    pub signal: Option<Vec<f64>>,
    #[serde(default = "SynthSection::default_noise_sd")]
    pub noise_sd: f64,
    #[serde(default = "SynthSection::default_market_vol")]
    pub market_vol: f64,
    #[serde(default = "SynthSection::default_mean_return")]
    pub mean_return: f64,
    /// Generator seed; independent of the run seed so regenerating data
    /// does not change sampling streams.
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl SynthSection {
    fn default_noise_sd() -> f64 {
        0.05
    }

    fn default_market_vol() -> f64 {
        0.02
    }

    fn default_mean_return() -> f64 {
        0.01
    }

    pub fn build(&self) -> SynthConfig {
        let mut config = SynthConfig::new(self.n_assets, self.n_months, self.k, self.seed);
        if let Some(signal) = &self.signal {
            config.signal = signal.clone();
        }
        config.noise_sd = self.noise_sd;
        config.market_vol = self.market_vol;
        config.mean_return = self.mean_return;
        config
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Base seed; every chain derives its own stream from it. Default 42.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Worker threads (0 = library default). Default 0.
    #[serde(default)]
    pub workers: usize,
    /// Output directory. Default "out".
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Grid points of the density CSV. Default 201.
    #[serde(default = "default_density_points")]
    pub density_points: usize,
    pub panel: PanelConfig,
    pub utility: UtilityConfig,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub proposal: ProposalConfig,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub lambda: LambdaConfig,
    pub windows: WindowsConfig,
    pub factors: Option<FactorsConfig>,
    pub synth: Option<SynthSection>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::config(format!("cannot parse config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.lambda.grid.is_empty() {
            return Err(CliError::config("lambda.grid must not be empty"));
        }
        if self.windows.end_months.is_empty() {
            return Err(CliError::config("windows.end_months must not be empty"));
        }
        if self.sampler.keep == 0 {
            return Err(CliError::config("sampler.keep must be at least 1"));
        }
        if self.sampler.chains == 0 {
            return Err(CliError::config("sampler.chains must be at least 1"));
        }
        Ok(())
    }

    /// Applies command-line and environment overrides (flags win over env,
    /// env wins over the file).
    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        workers: Option<usize>,
        out: Option<PathBuf>,
    ) -> Result<(), CliError> {
        let env_u64 = |name: &str| -> Result<Option<u64>, CliError> {
            match std::env::var(name) {
                Ok(v) => v
                    .parse()
                    .map(Some)
                    .map_err(|_| CliError::config(format!("{name} must be an integer"))),
                Err(_) => Ok(None),
            }
        };
        if let Some(v) = env_u64("PPP_GIBBS_SEED")? {
            self.seed = v;
        }
        if let Some(v) = env_u64("PPP_GIBBS_WORKERS")? {
            self.workers = v as usize;
        }
        if let Ok(v) = std::env::var("PPP_GIBBS_OUT") {
            self.out_dir = PathBuf::from(v);
        }
        if let Some(v) = seed {
            self.seed = v;
        }
        if let Some(v) = workers {
            self.workers = v;
        }
        if let Some(v) = out {
            self.out_dir = v;
        }
        Ok(())
    }

    /// Hash of the effective configuration, recorded in the manifest.
    /// Output location and worker count are normalized away: they change
    /// where and how fast results land, never what they contain.
    pub fn config_hash(&self) -> String {
        let mut scientific = self.clone();
        scientific.out_dir = PathBuf::new();
        scientific.workers = 0;
        let canonical = serde_json::to_string(&scientific).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}
