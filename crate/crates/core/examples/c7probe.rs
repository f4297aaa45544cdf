// Scratch probe: criterion-7-shaped LOO experiment on the default scenario.

use hpbm_core::synth::{generate_synthetic_site, truth_params, WeatherConfig};
use hpbm_core::training::{loo_cross_validate, LooConfig, SelectionPolicy, SiteSeries};
use std::time::Instant;

fn main() {
    let weather = WeatherConfig::default();
    let site_data = generate_synthetic_site(7, 4, &truth_params(), 0.005, &weather).unwrap();
    let site = SiteSeries {
        name: "probe".into(),
        forcing: site_data.forcing.clone(),
        observations: site_data.observations.clone(),
        steps_per_year: weather.steps_per_year(),
    };
    let cfg = LooConfig {
        counts: vec![8, 16],
        restarts: 3,
        seed: 0,
        selection: SelectionPolicy::Both,
        bma: true,
        ..LooConfig::default()
    };
    let t0 = Instant::now();
    let report = loo_cross_validate(&site, &cfg).unwrap();
    println!("total wall: {:.1}s", t0.elapsed().as_secs_f64());
    for f in &report.folds {
        println!(
            "fold year {}: cal_rmse={:.4} pbm={:.4} hpbm_is={:.4} hpbm_or={:.4} bma={:?} eq_conv={}",
            f.held_out_year,
            f.calibration_rmse,
            f.pbm_rmse,
            f.hpbm_in_sample_rmse.unwrap_or(f64::NAN),
            f.hpbm_oracle_rmse.unwrap_or(f64::NAN),
            f.bma_rmse,
            f.equilibration_converged,
        );
        for c in &f.candidates {
            println!(
                "  m={:2} r={} reg={:.4e} is={:.4} or={:.4} conv={}",
                c.m, c.restart, c.regression_rmse, c.in_sample_rmse.unwrap_or(f64::NAN), c.oracle_rmse.unwrap_or(f64::NAN), c.opt_converged
            );
        }
    }
    println!(
        "MEANS pbm={:.4} hpbm_is={:.4} ratio={:.3} hpbm_or={:.4} or_ratio={:.3} bma={:?} improvement_is={}% or={}%",
        report.pbm_mean_rmse,
        report.hpbm_in_sample_mean_rmse.unwrap_or(f64::NAN),
        report.hpbm_in_sample_mean_rmse.unwrap_or(f64::NAN) / report.pbm_mean_rmse,
        report.hpbm_oracle_mean_rmse.unwrap_or(f64::NAN),
        report.hpbm_oracle_mean_rmse.unwrap_or(f64::NAN) / report.pbm_mean_rmse,
        report.bma_mean_rmse,
        report.improvement_in_sample_pct.unwrap_or(0),
        report.improvement_oracle_pct.unwrap_or(0),
    );
    println!("leakage: {:?}", report.leakage());
}
