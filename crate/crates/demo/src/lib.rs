//! Browser bindings for the interactive demo page.
//!
//! The wrappers stay paper-thin: every computation lives in [`ops`] where
//! host-side tests can reach it. All results cross the boundary as JSON
//! strings; errors are `{"error": "..."}` payloads rather than exceptions.

use wasm_bindgen::prelude::*;

pub mod ops;

/// Exact GP posterior on a 1-D point set, for the curve explorer panel.
#[wasm_bindgen]
pub fn gp_curve(
    xs: Vec<f64>,
    ys: Vec<f64>,
    lengthscale: f64,
    signal_sd: f64,
    noise_sd: f64,
    grid_lo: f64,
    grid_hi: f64,
    grid_n: usize,
) -> String {
    ops::gp_curve(&xs, &ys, lengthscale, signal_sd, noise_sd, grid_lo, grid_hi, grid_n)
}

/// Flawed-threshold vs degree-day snowmelt on one generated winter.
#[wasm_bindgen]
pub fn snow_compare(seed: u64, days: usize, melt_threshold: f64, degree_day_factor: f64) -> String {
    ops::snow_compare(seed, days, melt_threshold, degree_day_factor)
}

/// Two-year twin experiment: learn year 1 residuals, roll out year 2.
#[wasm_bindgen]
pub fn hybrid_demo(seed: u64, inducing: usize, iters: usize) -> String {
    ops::hybrid_demo(seed, inducing, iters)
}
