//! Pipeline stages. `run` is the staged commands executed in order, so a
//! one-shot run and stage-by-stage execution produce identical files.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ppp_gibbs::diagnostics::{diagnose, write_report_json};
use ppp_gibbs::frontier::{calibrated_chain, sweep, write_frontier_csv, SweepConfig};
use ppp_gibbs::market::{load_panel, standardize_slice, window, CharacteristicPanel, StandardizedSlice};
use ppp_gibbs::policy::CompiledWindow;
use ppp_gibbs::predictive::{
    build_predictive_summary, density_grid, oos_paths, write_density_csv, write_summary_csv,
    PERIODS_PER_YEAR,
};
use ppp_gibbs::sampler::{
    derive_seed, lambda_seed, load_chain, run_chain, save_chain, Chain, PosteriorSummaryRecord,
};
use ppp_gibbs::attribution::{
    default_hac_lag, load_factor_panel, posterior_attribution, write_attribution_csv, FactorPanel,
};
use ppp_gibbs::synth::generate;

use crate::config::RunConfig;
use crate::CliError;

/// Writes through a temp file in the same directory, then renames, so no
/// output is ever observable half-written.
pub fn atomic_write<F>(path: &Path, write_fn: F) -> Result<(), CliError>
where
    F: FnOnce(&Path) -> Result<(), CliError>,
{
    let mut tmp_name = path
        .file_name()
        .ok_or_else(|| CliError::config(format!("bad output path {}", path.display())))?
        .to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    write_fn(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| {
        CliError::data(format!("cannot finalize {}: {e}", path.display()))
    })
}

fn window_dir(config: &RunConfig, end_month: &str) -> PathBuf {
    config.out_dir.join(end_month)
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", path.display())))
}

/// Generates the synthetic panel named by `[synth]` and writes it to the
/// panel path, so the rest of the pipeline runs on it unchanged.
pub fn stage_synth(config: &RunConfig) -> Result<PathBuf, CliError> {
    let section = config
        .synth
        .as_ref()
        .ok_or_else(|| CliError::config("synth requires a [synth] section"))?;
    let expected: Vec<String> = (1..=section.k).map(|j| format!("c{j}")).collect();
    if config.panel.schema.characteristics != expected {
        return Err(CliError::config(format!(
            "synthetic panels name their characteristics {expected:?}; panel.schema.characteristics must match"
        )));
    }
    let panel = generate(&section.build()).map_err(CliError::from)?;
    if let Some(parent) = config.panel.path.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    atomic_write(&config.panel.path, |tmp| {
        panel.write_csv(tmp).map_err(CliError::from)
    })?;
    Ok(config.panel.path.clone())
}

/// Loads and validates the configured panel.
pub fn load_configured_panel(config: &RunConfig) -> Result<CharacteristicPanel, CliError> {
    load_panel(&config.panel.path, &config.panel.schema).map_err(CliError::from)
}

/// Validation-only pass over the panel; returns a human-readable summary.
pub fn stage_ingest_check(config: &RunConfig) -> Result<String, CliError> {
    let panel = load_configured_panel(config)?;
    let months = panel.months();
    let mut n_min = usize::MAX;
    let mut n_max = 0;
    for month in months {
        let n = panel.cross_section(month).map(|cs| cs.n_assets()).unwrap_or(0);
        n_min = n_min.min(n);
        n_max = n_max.max(n);
    }
    // Standardization must succeed everywhere (catches constant columns).
    for month in months {
        standardize_slice(&panel, month).map_err(CliError::from)?;
    }
    Ok(format!(
        "panel ok: {} months {}..{}, K = {}, assets per month {}..{}",
        months.len(),
        months.first().unwrap(),
        months.last().unwrap(),
        panel.k(),
        n_min,
        n_max
    ))
}

fn estimation_window(
    config: &RunConfig,
    panel: &CharacteristicPanel,
    end_month: &str,
) -> Result<CompiledWindow, CliError> {
    let slices = window(panel, end_month, config.windows.length).map_err(CliError::from)?;
    CompiledWindow::from_slices(&slices).map_err(CliError::from)
}

fn oos_slices(
    config: &RunConfig,
    panel: &CharacteristicPanel,
    end_month: &str,
) -> Result<Vec<StandardizedSlice>, CliError> {
    let months = panel.months();
    let end_idx = months
        .iter()
        .position(|m| m == end_month)
        .ok_or_else(|| CliError::data(format!("month {end_month} not in panel")))?;
    let horizon = config.windows.oos_horizon;
    if end_idx + 1 + horizon > months.len() {
        return Err(CliError::data(format!(
            "window {end_month} needs {horizon} out-of-sample months; only {} remain",
            months.len() - end_idx - 1
        )));
    }
    (end_idx + 1..=end_idx + horizon)
        .map(|i| standardize_slice(panel, &months[i].clone()).map_err(CliError::from))
        .collect()
}

fn sweep_config(config: &RunConfig) -> SweepConfig {
    SweepConfig {
        sampler: config.sampler.sampler_config(),
        calibration: config.proposal.calibration(),
    }
}

/// Per-lambda posterior summaries persisted next to the frontier.
#[derive(Debug, Serialize, Deserialize)]
struct SweepRecord {
    lambda: f64,
    seed: u64,
    acceptance_rates: Vec<f64>,
    calibrated_scales: Option<Vec<f64>>,
    summary: PosteriorSummaryRecord,
}

/// Grid sweep for every configured window end: identification frontier
/// CSV plus per-lambda posterior summaries.
pub fn stage_sweep(config: &RunConfig, panel: &CharacteristicPanel) -> Result<(), CliError> {
    let utility = config.utility.build()?;
    let prior = config.prior.build(panel.k())?;
    let proposal = config.proposal.build(panel.k())?;
    let sweep_cfg = sweep_config(config);
    for end_month in &config.windows.end_months {
        let compiled = estimation_window(config, panel, end_month)?;
        let outcome = sweep(
            &compiled,
            &utility,
            &prior,
            &proposal,
            &config.lambda.grid,
            &sweep_cfg,
            config.seed,
        )
        .map_err(CliError::from)?;
        let dir = window_dir(config, end_month);
        ensure_dir(&dir)?;
        atomic_write(&dir.join("frontier.csv"), |tmp| {
            write_frontier_csv(&outcome.points, &outcome.selection, tmp).map_err(CliError::from)
        })?;
        let records: Vec<SweepRecord> = outcome
            .chains
            .iter()
            .zip(&outcome.summaries)
            .zip(&outcome.calibrations)
            .map(|((chain, summary), calibration)| SweepRecord {
                lambda: chain.lambda,
                seed: chain.seed,
                acceptance_rates: chain
                    .accept_counts
                    .iter()
                    .zip(&chain.proposal_counts)
                    .map(|(a, p)| *a as f64 / (*p).max(1) as f64)
                    .collect(),
                calibrated_scales: calibration.as_ref().map(|c| c.proposal.scales.clone()),
                summary: PosteriorSummaryRecord::from(summary),
            })
            .collect();
        atomic_write(&dir.join("sweep_summaries.json"), |tmp| {
            let file = fs::File::create(tmp)
                .map_err(|e| CliError::data(format!("cannot write {}: {e}", tmp.display())))?;
            serde_json::to_writer_pretty(std::io::BufWriter::new(file), &records)
                .map_err(|e| CliError::data(format!("cannot serialize sweep summaries: {e}")))
        })?;
    }
    Ok(())
}

/// Reads lambda-star back from a persisted frontier CSV (the row with
/// selected = 1).
pub fn lambda_star_from_frontier(path: &Path) -> Result<f64, CliError> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| CliError::data(format!("bad frontier file: {e}")))?
        .clone();
    let lambda_col = headers
        .iter()
        .position(|h| h == "lambda")
        .ok_or_else(|| CliError::data("frontier file lacks a lambda column"))?;
    let selected_col = headers
        .iter()
        .position(|h| h == "selected")
        .ok_or_else(|| CliError::data("frontier file lacks a selected column"))?;
    for record in reader.records() {
        let record = record.map_err(|e| CliError::data(format!("bad frontier row: {e}")))?;
        if record.get(selected_col) == Some("1") {
            return record
                .get(lambda_col)
                .unwrap_or("")
                .parse()
                .map_err(|_| CliError::data("unparsable lambda in frontier file"));
        }
    }
    Err(CliError::data("no selected row in frontier file"))
}

fn chain_paths(dir: &Path, replica: usize) -> (PathBuf, PathBuf) {
    if replica == 0 {
        (dir.join("chain_star.csv"), dir.join("chain_star.json"))
    } else {
        (
            dir.join(format!("chain_star_replica{replica}.csv")),
            dir.join(format!("chain_star_replica{replica}.json")),
        )
    }
}

/// Chains at lambda-star (or an explicit lambda): replica 0 reproduces the
/// sweep's chain through the same derived seed and calibration stream;
/// further replicas share the frozen kernel with independent seeds.
pub fn stage_sample(
    config: &RunConfig,
    panel: &CharacteristicPanel,
    lambda_override: Option<f64>,
) -> Result<(), CliError> {
    let utility = config.utility.build()?;
    let prior = config.prior.build(panel.k())?;
    let proposal = config.proposal.build(panel.k())?;
    let sweep_cfg = sweep_config(config);
    for end_month in &config.windows.end_months {
        let dir = window_dir(config, end_month);
        ensure_dir(&dir)?;
        let lambda = match lambda_override {
            Some(l) => l,
            None => lambda_star_from_frontier(&dir.join("frontier.csv"))?,
        };
        let compiled = estimation_window(config, panel, end_month)?;
        let (chain, _, calibration) = calibrated_chain(
            &compiled,
            &utility,
            lambda,
            &prior,
            &proposal,
            &sweep_cfg,
            config.seed,
        )
        .map_err(CliError::from)?;
        let kernel = calibration
            .as_ref()
            .map(|c| c.proposal.clone())
            .unwrap_or_else(|| proposal.clone());
        let (csv_path, json_path) = chain_paths(&dir, 0);
        atomic_write(&csv_path, |tmp_csv| {
            atomic_write(&json_path, |tmp_json| {
                save_chain(&chain, tmp_csv, tmp_json).map_err(CliError::from)
            })
        })?;
        for replica in 1..config.sampler.chains {
            let seed = derive_seed(lambda_seed(config.seed, lambda), replica as u64);
            let replica_chain = run_chain(
                &compiled,
                &utility,
                lambda,
                &prior,
                &kernel,
                &config.sampler.sampler_config(),
                seed,
            )
            .map_err(|e| CliError::numeric(format!("replica {replica}: {e}")))?;
            let (csv_path, json_path) = chain_paths(&dir, replica);
            atomic_write(&csv_path, |tmp_csv| {
                atomic_write(&json_path, |tmp_json| {
                    save_chain(&replica_chain, tmp_csv, tmp_json).map_err(CliError::from)
                })
            })?;
        }
    }
    Ok(())
}

fn load_window_chains(config: &RunConfig, end_month: &str) -> Result<Vec<(String, Chain)>, CliError> {
    let dir = window_dir(config, end_month);
    let mut chains = Vec::new();
    for replica in 0..config.sampler.chains {
        let (csv_path, json_path) = chain_paths(&dir, replica);
        if !csv_path.exists() {
            break;
        }
        let id = csv_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("chain{replica}"));
        chains.push((id, load_chain(&csv_path, &json_path).map_err(CliError::from)?));
    }
    if chains.is_empty() {
        return Err(CliError::data(format!(
            "no persisted chains under {}; run `sample` first",
            dir.display()
        )));
    }
    Ok(chains)
}

fn factor_panel_for(
    config: &RunConfig,
    oos_months: &[String],
) -> Result<Option<(FactorPanel, Vec<f64>)>, CliError> {
    let Some(factors) = &config.factors else {
        return Ok(None);
    };
    if !factors.path.exists() {
        return Err(CliError::config(format!(
            "factor file {} does not exist",
            factors.path.display()
        )));
    }
    let panel = load_factor_panel(&factors.path).map_err(CliError::from)?;
    let aligned = panel.aligned_to(oos_months).map_err(CliError::from)?;
    let rf = aligned.risk_free.clone();
    Ok(Some((aligned, rf)))
}

/// Posterior-predictive reports for each window: the summary-table CSV and
/// the density-grid CSV.
pub fn stage_predict(config: &RunConfig, panel: &CharacteristicPanel) -> Result<(), CliError> {
    let utility = config.utility.build()?;
    for end_month in &config.windows.end_months {
        let dir = window_dir(config, end_month);
        let (csv_path, json_path) = chain_paths(&dir, 0);
        let chain = load_chain(&csv_path, &json_path).map_err(CliError::from)?;
        let oos = oos_slices(config, panel, end_month)?;
        let oos_months: Vec<String> = oos.iter().map(|s| s.month.clone()).collect();
        let rf = factor_panel_for(config, &oos_months)?.map(|(_, rf)| rf);
        let summary = build_predictive_summary(
            &chain.draws,
            &oos,
            &utility,
            rf.as_deref(),
            PERIODS_PER_YEAR,
        )
        .map_err(CliError::from)?;
        atomic_write(&dir.join("predictive_summary.csv"), |tmp| {
            write_summary_csv(&summary, tmp).map_err(CliError::from)
        })?;

        let paths = oos_paths(&chain.draws, &oos).map_err(CliError::from)?;
        let policy_pool: Vec<f64> = paths.iter().cloned().collect();
        let benchmark: Vec<f64> = oos
            .iter()
            .map(|s| s.benchmark_weights.dot(&s.next_returns))
            .collect();
        let grid = density_grid(&policy_pool, &benchmark, config.density_points)
            .map_err(CliError::from)?;
        atomic_write(&dir.join("density.csv"), |tmp| {
            write_density_csv(&grid, tmp).map_err(CliError::from)
        })?;
    }
    Ok(())
}

/// Convergence diagnostics over the persisted chains of each window.
pub fn stage_diagnose(config: &RunConfig) -> Result<(), CliError> {
    for end_month in &config.windows.end_months {
        let chains = load_window_chains(config, end_month)?;
        let refs: Vec<(String, &Chain)> =
            chains.iter().map(|(id, c)| (id.clone(), c)).collect();
        let report = diagnose(&refs).map_err(CliError::from)?;
        let dir = window_dir(config, end_month);
        atomic_write(&dir.join("diagnostics.json"), |tmp| {
            write_report_json(&report, tmp).map_err(CliError::from)
        })?;
    }
    Ok(())
}

/// Diagnostics over explicitly named chain CSVs (sidecars alongside).
pub fn diagnose_files(paths: &[PathBuf], out: Option<&Path>) -> Result<String, CliError> {
    let mut chains = Vec::new();
    for csv_path in paths {
        let json_path = csv_path.with_extension("json");
        let id = csv_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        chains.push((id, load_chain(csv_path, &json_path).map_err(CliError::from)?));
    }
    let refs: Vec<(String, &Chain)> = chains.iter().map(|(id, c)| (id.clone(), c)).collect();
    let report = diagnose(&refs).map_err(CliError::from)?;
    if let Some(out) = out {
        atomic_write(out, |tmp| {
            write_report_json(&report, tmp).map_err(CliError::from)
        })?;
    }
    serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::numeric(format!("cannot serialize report: {e}")))
}

/// Factor regressions of the posterior out-of-sample paths.
pub fn stage_attribute(config: &RunConfig, panel: &CharacteristicPanel) -> Result<(), CliError> {
    let Some(factors_cfg) = &config.factors else {
        return Err(CliError::config(
            "attribute requires a [factors] section with a factor CSV path",
        ));
    };
    if !factors_cfg.path.exists() {
        return Err(CliError::config(format!(
            "factor file {} does not exist",
            factors_cfg.path.display()
        )));
    }
    for end_month in &config.windows.end_months {
        let dir = window_dir(config, end_month);
        let (csv_path, json_path) = chain_paths(&dir, 0);
        let chain = load_chain(&csv_path, &json_path).map_err(CliError::from)?;
        let oos = oos_slices(config, panel, end_month)?;
        let oos_months: Vec<String> = oos.iter().map(|s| s.month.clone()).collect();
        let (factors, rf) = factor_panel_for(config, &oos_months)?
            .expect("factors checked above");
        let paths = oos_paths(&chain.draws, &oos).map_err(CliError::from)?;
        let lag = config
            .factors
            .as_ref()
            .and_then(|f| f.hac_lag)
            .unwrap_or_else(|| default_hac_lag(oos_months.len()));
        let attribution =
            posterior_attribution(&paths, &factors.factor_returns, &rf, lag)
                .map_err(CliError::from)?;
        atomic_write(&dir.join("attribution.csv"), |tmp| {
            write_attribution_csv(&attribution, &factors.factor_names, tmp)
                .map_err(CliError::from)
        })?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    seed: u64,
    outputs: Vec<ManifestEntry>,
}

fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn write_manifest(config: &RunConfig) -> Result<(), CliError> {
    let mut outputs = Vec::new();
    for end_month in &config.windows.end_months {
        let dir = window_dir(config, end_month);
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| CliError::data(format!("cannot list {}: {e}", dir.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e != "tmp"))
            .collect();
        entries.sort();
        for path in entries {
            let rel = path
                .strip_prefix(&config.out_dir)
                .unwrap_or(&path)
                .to_string_lossy()
                .into_owned();
            outputs.push(ManifestEntry {
                sha256: hash_file(&path)?,
                path: rel,
            });
        }
    }
    outputs.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        config_hash: config.config_hash(),
        seed: config.seed,
        outputs,
    };
    atomic_write(&config.out_dir.join("manifest.json"), |tmp| {
        let file = fs::File::create(tmp)
            .map_err(|e| CliError::data(format!("cannot write {}: {e}", tmp.display())))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &manifest)
            .map_err(|e| CliError::data(format!("cannot serialize manifest: {e}")))
    })
}

/// The full pipeline, window by window, then the manifest. Composed from
/// the staged functions so staged and one-shot execution write identical
/// bytes.
pub fn stage_run(config: &RunConfig) -> Result<(), CliError> {
    let panel = load_configured_panel(config)?;
    stage_sweep(config, &panel)?;
    stage_sample(config, &panel, None)?;
    stage_predict(config, &panel)?;
    stage_diagnose(config)?;
    if config.factors.is_some() {
        stage_attribute(config, &panel)?;
    }
    write_manifest(config)
}
