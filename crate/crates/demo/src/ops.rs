//! Demo computations, free of any browser types so they are testable on the
//! host. Every op returns a JSON string; failures come back as
//! `{"error": "..."}` so the page has a single decode path.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use hpbm_core::dataset::Dataset;
use hpbm_core::error::Error;
use hpbm_core::hybrid::{
    build_training_set, equilibrate_unobserved, rollout, Corrector, EquilibrationOptions,
    HybridModel, SegmentRef,
};
use hpbm_core::kernel::KernelHyperparams;
use hpbm_core::pbm::{pbm_run, MeltMode, PbmParams, PbmState};
use hpbm_core::spgp::{fit_spgp, SpgpOptions};
use hpbm_core::synth::{generate_forcing, generate_synthetic_site, truth_params, WeatherConfig};

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("demo payloads are plain data")
}

pub fn error_json(message: &str) -> String {
    #[derive(Serialize)]
    struct Fail<'a> {
        error: &'a str,
    }
    to_json(&Fail { error: message })
}

fn or_error(result: Result<String, Error>) -> String {
    result.unwrap_or_else(|e| error_json(&e.to_string()))
}

/// Condition an exact GP on user-placed 1-D points and evaluate the
/// posterior on a regular grid. Hyperparameters come straight from the
/// page's sliders; there is no optimization step to keep it instant.
pub fn gp_curve(
    xs: &[f64],
    ys: &[f64],
    lengthscale: f64,
    signal_sd: f64,
    noise_sd: f64,
    grid_lo: f64,
    grid_hi: f64,
    grid_n: usize,
) -> String {
    or_error(gp_curve_inner(xs, ys, lengthscale, signal_sd, noise_sd, grid_lo, grid_hi, grid_n))
}

fn gp_curve_inner(
    xs: &[f64],
    ys: &[f64],
    lengthscale: f64,
    signal_sd: f64,
    noise_sd: f64,
    grid_lo: f64,
    grid_hi: f64,
    grid_n: usize,
) -> Result<String, Error> {
    #[derive(Serialize)]
    struct Curve {
        grid: Vec<f64>,
        mean: Vec<f64>,
        sd: Vec<f64>,
    }
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::InvalidData("need matching, nonempty x/y arrays".into()));
    }
    if !(grid_hi > grid_lo) || grid_n < 2 || grid_n > 4096 {
        return Err(Error::InvalidData("bad grid".into()));
    }
    let data = Dataset::new(
        DMatrix::from_column_slice(xs.len(), 1, xs),
        DVector::from_column_slice(ys),
    )?;
    let hyper = KernelHyperparams::new(
        (signal_sd * signal_sd).max(1e-12),
        vec![lengthscale.max(1e-6)],
        (noise_sd * noise_sd).max(1e-12),
    )?;
    // Raw-space conditioning: the page's slider lengthscale is in data
    // units, so standardization would silently rescale it.
    let model = hpbm_core::gp::fit_exact_raw(&data, &hyper)?;
    let grid: Vec<f64> = (0..grid_n)
        .map(|i| grid_lo + (grid_hi - grid_lo) * i as f64 / (grid_n - 1) as f64)
        .collect();
    let mut mean = Vec::with_capacity(grid_n);
    let mut sd = Vec::with_capacity(grid_n);
    for &g in &grid {
        let (mu, var) = model.predict(&[g])?;
        mean.push(mu);
        sd.push(var.max(0.0).sqrt());
    }
    Ok(to_json(&Curve { grid, mean, sd }))
}

/// Run the bucket model through one winter in both melt modes on the same
/// generated forcing, so the page can draw the threshold scheme's
/// oscillatory dumps against the degree-day behaviour.
pub fn snow_compare(seed: u64, days: usize, melt_threshold: f64, degree_day_factor: f64) -> String {
    or_error(snow_compare_inner(seed, days, melt_threshold, degree_day_factor))
}

fn snow_compare_inner(
    seed: u64,
    days: usize,
    melt_threshold: f64,
    degree_day_factor: f64,
) -> Result<String, Error> {
    #[derive(Serialize)]
    struct Compare {
        step_hours: f64,
        air_temp_c: Vec<f64>,
        theta_flawed: Vec<f64>,
        theta_degree_day: Vec<f64>,
        swe_flawed: Vec<f64>,
        swe_degree_day: Vec<f64>,
    }
    if days == 0 || days > 400 {
        return Err(Error::InvalidData("days outside 1..=400".into()));
    }
    let weather = WeatherConfig { days_per_year: days, ..WeatherConfig::default() };
    let forcing = generate_forcing(seed, 1, &weather);

    let flawed = PbmParams {
        melt_mode: MeltMode::FlawedThreshold,
        melt_threshold_c: melt_threshold,
        ..PbmParams::default()
    };
    let degree_day = PbmParams {
        melt_mode: MeltMode::DegreeDay,
        melt_threshold_c: 0.0,
        degree_day_factor: degree_day_factor.max(0.0),
        ..PbmParams::default()
    };
    let initial = PbmState::at_field_capacity(&flawed);
    let run_f = pbm_run(&initial, &forcing, &flawed)?;
    let run_d = pbm_run(&initial, &forcing, &degree_day)?;

    Ok(to_json(&Compare {
        step_hours: 0.5,
        air_temp_c: forcing.iter().map(|f| f.air_temp_c).collect(),
        theta_flawed: run_f.states.iter().map(|s| s.theta_top).collect(),
        theta_degree_day: run_d.states.iter().map(|s| s.theta_top).collect(),
        swe_flawed: run_f.states.iter().map(|s| s.swe_mm).collect(),
        swe_degree_day: run_d.states.iter().map(|s| s.swe_mm).collect(),
    }))
}

/// Small twin experiment: generate a 2-year site whose truth melts by
/// degree-day, hand the flawed-threshold model year 1 to learn from, and
/// roll both the plain and corrected model through year 2.
pub fn hybrid_demo(seed: u64, inducing: usize, iters: usize) -> String {
    or_error(hybrid_demo_inner(seed, inducing, iters))
}

fn hybrid_demo_inner(seed: u64, inducing: usize, iters: usize) -> Result<String, Error> {
    #[derive(Serialize)]
    struct Demo {
        theta_obs: Vec<Option<f64>>,
        theta_pbm: Vec<f64>,
        theta_hpbm: Vec<f64>,
        correction: Vec<f64>,
        pbm_rmse: f64,
        hpbm_rmse: f64,
    }
    if !(1..=64).contains(&inducing) || iters > 500 {
        return Err(Error::InvalidData("inducing outside 1..=64 or iters > 500".into()));
    }
    let weather = WeatherConfig { days_per_year: 120, ..WeatherConfig::default() };
    let site = generate_synthetic_site(seed, 2, &truth_params(), 0.004, &weather)?;
    let spy = weather.days_per_year * 48;

    let train = SegmentRef {
        forcing: &site.forcing[..spy],
        observations: &site.observations[..spy],
        start_index: 0,
    };
    let test = SegmentRef {
        forcing: &site.forcing[spy..],
        observations: &site.observations[spy..],
        start_index: spy,
    };

    let params = PbmParams { melt_threshold_c: 1.0, ..PbmParams::default() };
    let opts = EquilibrationOptions::default();
    let ts = build_training_set(&[train], &params, &opts)?;
    let mut sopts = SpgpOptions::default();
    sopts.opt.max_iters = iters;
    let fit = fit_spgp(&ts.data, inducing.min(ts.data.n()), seed ^ 0x5eed, &sopts)?;

    let mut init = equilibrate_unobserved(&train, &params, &opts)?.states[0];
    if let Some(first) = test.observations.iter().flatten().next() {
        init.theta_top = first.clamp(params.theta_residual, params.theta_saturation);
    }
    let pbm = HybridModel::uncorrected(params.clone());
    let hpbm = HybridModel { params, corrector: Corrector::Sparse(fit.model) };
    let pbm_run = rollout(&pbm, &init, test.forcing)?;
    let hpbm_run = rollout(&hpbm, &init, test.forcing)?;

    let score = |theta: &[f64]| -> f64 {
        let mut sse = 0.0;
        let mut n = 0usize;
        for t in 1..test.forcing.len() {
            if let Some(o) = test.observations[t] {
                let r = theta[t] - o;
                sse += r * r;
                n += 1;
            }
        }
        (sse / n.max(1) as f64).sqrt()
    };

    let correction: Vec<f64> =
        hpbm_run.theta_top.iter().zip(&pbm_run.theta_top).map(|(h, p)| h - p).collect();
    Ok(to_json(&Demo {
        pbm_rmse: score(&pbm_run.theta_top),
        hpbm_rmse: score(&hpbm_run.theta_top),
        theta_obs: test.observations.to_vec(),
        theta_pbm: pbm_run.theta_top,
        theta_hpbm: hpbm_run.theta_top,
        correction,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gp_curve_reverts_to_zero_far_from_data() {
        let out = gp_curve(&[0.0, 1.0, 2.0], &[0.5, -0.2, 0.3], 0.5, 1.0, 0.1, -40.0, 40.0, 81);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(v.get("error").is_none(), "{out}");
        let mean = v["mean"].as_array().unwrap();
        let sd = v["sd"].as_array().unwrap();
        assert_eq!(mean.len(), 81);
        // Ends of the grid are 38+ lengthscales from all data.
        assert!(mean[0].as_f64().unwrap().abs() < 1e-10);
        assert!(mean[80].as_f64().unwrap().abs() < 1e-10);
        assert!((sd[80].as_f64().unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gp_curve_rejects_mismatched_points() {
        let out = gp_curve(&[0.0, 1.0], &[0.5], 0.5, 1.0, 0.1, 0.0, 1.0, 16);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(v.get("error").is_some());
    }

    #[test]
    fn snow_compare_is_deterministic_and_oscillates() {
        let a = snow_compare(9, 120, 1.0, 0.08);
        let b = snow_compare(9, 120, 1.0, 0.08);
        assert_eq!(a, b);
        let v: serde_json::Value = serde_json::from_str(&a).unwrap();
        assert!(v.get("error").is_none(), "{a}");
        assert_eq!(v["theta_flawed"].as_array().unwrap().len(), 120 * 48 + 1);
    }

    #[test]
    fn hybrid_demo_produces_scored_rollouts() {
        let out = hybrid_demo(3, 8, 40);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert!(v.get("error").is_none(), "{out}");
        assert!(v["pbm_rmse"].as_f64().unwrap() > 0.0);
        assert!(v["hpbm_rmse"].as_f64().unwrap() > 0.0);
        let n = v["theta_pbm"].as_array().unwrap().len();
        assert_eq!(v["theta_hpbm"].as_array().unwrap().len(), n);
    }
}
