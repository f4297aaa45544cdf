// Scratch probe: wall time of one SPGP fit at criterion-7 scale.

use hpbm_core::hybrid::{build_training_set, EquilibrationOptions, SegmentRef};
use hpbm_core::pbm::PbmParams;
use hpbm_core::spgp::{fit_spgp, SpgpOptions};
use hpbm_core::synth::{generate_synthetic_site, truth_params, WeatherConfig};
use std::time::Instant;

fn main() {
    let weather = WeatherConfig::default();
    let t0 = Instant::now();
    let site = generate_synthetic_site(7, 4, &truth_params(), 0.005, &weather).unwrap();
    println!("site: {} steps [{:.1}s]", site.forcing.len(), t0.elapsed().as_secs_f64());

    // Training years 1..4 (fold holding out year 0).
    let spy = weather.steps_per_year();
    let seg = SegmentRef {
        forcing: &site.forcing[spy..],
        observations: &site.observations[spy..],
        start_index: spy,
    };
    let base = PbmParams::default();
    let t0 = Instant::now();
    let ts = build_training_set(&[seg], &base, &EquilibrationOptions::default()).unwrap();
    println!("training set: n={} [{:.1}s]", ts.n(), t0.elapsed().as_secs_f64());

    for m in [8usize, 16] {
        let t0 = Instant::now();
        let fit = fit_spgp(&ts.data, m, 1, &SpgpOptions::default()).unwrap();
        println!(
            "fit m={m}: iters={} evals={} conv={} [{:.1}s]",
            fit.opt.iterations,
            fit.opt.evaluations,
            fit.opt.converged,
            t0.elapsed().as_secs_f64()
        );
    }
}
