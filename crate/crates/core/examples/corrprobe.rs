// Scratch probe: fit quality and closed-loop win rate of trained correctors
// against the zero corrector on the flawed-melt site.

use hpbm_core::hybrid::{
    build_training_set, equilibrate_unobserved, rollout, Corrector, EquilibrationOptions,
    HybridModel, SegmentRef,
};
use hpbm_core::opt::OptConfig;
use hpbm_core::pbm::{MeltMode, PbmParams};
use hpbm_core::spgp::{fit_spgp, SpgpOptions};
use hpbm_core::synth::{generate_synthetic_site, truth_params, WeatherConfig};
use std::time::Instant;

fn main() {
    let flawed = PbmParams {
        melt_mode: MeltMode::FlawedThreshold,
        melt_threshold_c: 1.0,
        ..truth_params()
    };
    let weather = WeatherConfig { days_per_year: 90, ..WeatherConfig::default() };
    let site = generate_synthetic_site(23, 1, &truth_params(), 0.0, &weather).unwrap();
    let seg = SegmentRef {
        forcing: &site.forcing,
        observations: &site.observations,
        start_index: 0,
    };
    let ts = build_training_set(&[seg], &flawed, &EquilibrationOptions::default()).unwrap();

    let targets = ts.data.targets();
    let n = targets.len();
    let rms = (targets.iter().map(|t| t * t).sum::<f64>() / n as f64).sqrt();
    println!("targets: n={n} rms={rms:.3e}");

    let eq = equilibrate_unobserved(&seg, &flawed, &EquilibrationOptions::default()).unwrap();
    let mut init = eq.states[0];
    if let Some(y0) = site.observations[0] {
        init.theta_top = y0.clamp(flawed.theta_residual, flawed.theta_saturation);
    }
    let zero = HybridModel { params: flawed.clone(), corrector: Corrector::Zero };
    let rz = rollout(&zero, &init, site.forcing.as_slice()).unwrap();
    let sse = |r: &hpbm_core::hybrid::Rollout| -> f64 {
        (1..site.forcing.len())
            .filter_map(|t| site.observations[t].map(|o| (r.theta_top[t] - o).powi(2)))
            .sum()
    };
    let z_sse = sse(&rz);
    println!("zero rollout SSE: {z_sse:.4}");

    for iters in [500usize, 1500] {
        for m in [16usize, 32] {
            for seed in 40u64..44 {
                let opts = SpgpOptions {
                    opt: OptConfig { max_iters: iters, ..OptConfig::default() },
                    ..SpgpOptions::default()
                };
                let t0 = Instant::now();
                let fit = fit_spgp(&ts.data, m, seed, &opts).unwrap();
                let secs = t0.elapsed().as_secs_f64();
                let mut ss = 0.0;
                for i in 0..n {
                    let x: Vec<f64> = ts.data.inputs().row(i).iter().cloned().collect();
                    let (mu, _) = fit.model.predict(&x).unwrap();
                    ss += (mu - targets[i]).powi(2);
                }
                let reg = (ss / n as f64).sqrt();
                let trained = HybridModel {
                    params: flawed.clone(),
                    corrector: Corrector::Sparse(fit.model.clone()),
                };
                let rt = rollout(&trained, &init, site.forcing.as_slice()).unwrap();
                let t_sse = sse(&rt);
                println!(
                    "iters {iters:4} m {m:2} seed {seed}: reg rmse={reg:.3e} conv={} it={} \
                     rollout SSE={t_sse:.4} ratio={:.3} clips={} [{secs:.1}s]",
                    fit.opt.converged,
                    fit.opt.iterations,
                    t_sse / z_sse,
                    rt.clip_count,
                );
            }
        }
    }
}
