//! wasm-bindgen surface for the browser demo. Each export returns a JSON
//! string; the page parses it and draws on canvas. The real work lives in
//! `demo`, which also compiles and tests on the host.

mod demo;

use wasm_bindgen::prelude::*;

pub use demo::{density_view, frontier_view, sampler_view};

fn to_js<T>(result: Result<T, String>) -> Result<T, JsValue> {
    result.map_err(|e| JsValue::from_str(&e))
}

/// Analytic identification frontier and KNEEDLE selection for a seeded
/// quadratic model; `gamma` moves lambda-star while tau-star stays fixed.
#[wasm_bindgen]
pub fn frontier_explore(gamma: f64, q_scale: f64, seed: u64) -> Result<String, JsValue> {
    to_js(demo::frontier_view(gamma, q_scale, seed))
}

/// Metropolis-within-Gibbs draws on a 2-coordinate quadratic-oracle
/// target, with the closed-form posterior for the overlay.
#[wasm_bindgen]
pub fn sample_oracle(
    lambda: f64,
    gamma: f64,
    alpha: f64,
    scale: f64,
    sweeps: usize,
    seed: u64,
) -> Result<String, JsValue> {
    to_js(demo::sampler_view(lambda, gamma, alpha, scale, sweeps, seed))
}

/// Posterior-predictive out-of-sample return densities on a synthetic
/// market versus the value-weighted benchmark.
#[wasm_bindgen]
pub fn predictive_densities(lambda: f64, signal: f64, seed: u64) -> Result<String, JsValue> {
    to_js(demo::density_view(lambda, signal, seed))
}
