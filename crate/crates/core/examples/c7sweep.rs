//! Scenario-design sweep: separability of the aliased regime, and the
//! noise-free learnability ceiling, per candidate scenario.

use hpbm_core::calibration::{calibrate_pbm, CalibrationSpec, SceConfig};
use hpbm_core::hybrid::{
    build_training_set, equilibrate_unobserved, rollout, Corrector, EquilibrationOptions,
    HybridModel, SegmentRef,
};
use hpbm_core::pbm::{pbm_step, PbmParams};
use hpbm_core::spgp::{fit_spgp, SpgpOptions};
use hpbm_core::synth::{generate_synthetic_site, truth_params, WeatherConfig};

fn rmse_vs_obs(theta: &[f64], obs: &[Option<f64>]) -> f64 {
    let mut sse = 0.0;
    let mut n = 0usize;
    for t in 1..obs.len() {
        if let Some(o) = obs[t] {
            let r = theta[t] - o;
            sse += r * r;
            n += 1;
        }
    }
    (sse / n as f64).sqrt()
}

fn probe(label: &str, weather: &WeatherConfig, truth: &PbmParams, noise: f64) {
    println!("=== {label} noise={noise} ===");
    let site = generate_synthetic_site(7, 4, truth, noise, weather).unwrap();
    let spy = weather.days_per_year * 48;
    let n_total = site.forcing.len();

    let mut truth_states = Vec::with_capacity(n_total + 1);
    truth_states.push(site.initial_state);
    for t in 0..n_total {
        let (next, _) = pbm_step(&truth_states[t], &site.forcing[t], truth);
        truth_states.push(next);
    }
    let max_pack = truth_states.iter().map(|s| s.swe_mm).fold(0.0, f64::max);
    println!("truth pack max={max_pack:.0}mm");

    let train = SegmentRef {
        forcing: &site.forcing[spy..],
        observations: &site.observations[spy..],
        start_index: spy,
    };
    let eval = SegmentRef {
        forcing: &site.forcing[..spy],
        observations: &site.observations[..spy],
        start_index: 0,
    };

    let sce = SceConfig { seed: 11, max_evals: 3000, ..SceConfig::default() };
    let cal = calibrate_pbm(&PbmParams::default(), &CalibrationSpec::default(), &[train], &sce)
        .unwrap();
    println!(
        "cal: rmse={:.4} infil={:.2} perc={:.4} etp={:.2} thresh={:.2}",
        cal.rmse,
        cal.params.infiltration_rate_max_mm,
        cal.params.percolation_coeff,
        cal.params.et_partition,
        cal.params.melt_threshold_c
    );

    let opts = EquilibrationOptions::default();
    let eq = equilibrate_unobserved(&train, &cal.params, &opts).unwrap();
    let mut init0 = eq.states[0];
    if let Some(first) = eval.observations.iter().flatten().next() {
        init0.theta_top = *first;
    }
    let pbm_model = HybridModel::uncorrected(cal.params.clone());
    let pbm_run = rollout(&pbm_model, &init0, eval.forcing).unwrap();
    let pbm_rmse = rmse_vs_obs(&pbm_run.theta_top, eval.observations);
    println!("pbm held-out rmse = {pbm_rmse:.4}");

    let ts = build_training_set(&[train], &cal.params, &opts).unwrap();
    let inputs = ts.data.inputs();
    let targets = ts.data.targets();
    let n = ts.data.n();
    let thresh = cal.params.melt_threshold_c;
    // 0 cold, 1 learnable band, 2 dump, 3 aliased, 4 snow-free warm
    let bin_of = |i: usize| -> usize {
        let swe = inputs[(i, 1)];
        let temp = inputs[(i, 3)];
        let truth_swe = truth_states[ts.provenance[i].timestep].swe_mm;
        if temp <= 0.0 {
            0
        } else if swe > 0.5 && temp <= thresh {
            1
        } else if swe > 0.5 {
            2
        } else if truth_swe > 0.5 {
            3
        } else {
            4
        }
    };
    let labels = ["cold", "band", "dump", "aliased", "warm-dry"];
    let mut count = [0usize; 5];
    let mut sum = [0.0f64; 5];
    // feature accumulators: theta_lower, pet, theta_top
    let mut f_lower = [0.0f64; 5];
    let mut f_pet = [0.0f64; 5];
    let mut f_top = [0.0f64; 5];
    for i in 0..n {
        let b = bin_of(i);
        count[b] += 1;
        sum[b] += targets[i];
        f_lower[b] += inputs[(i, 0)];
        f_pet[b] += inputs[(i, 4)];
        f_top[b] += inputs[(i, 5)];
    }
    for b in 0..5 {
        if count[b] == 0 {
            continue;
        }
        let c = count[b] as f64;
        println!(
            "  {:<9} n={:>6} resid={:+.2e} | th_lo={:.3} th_top={:.3} pet={:.4}",
            labels[b],
            count[b],
            sum[b] / c,
            f_lower[b] / c,
            f_top[b] / c,
            f_pet[b] / c
        );
    }

    for seed in [40u64, 41, 42] {
        let mut sopts = SpgpOptions::default();
        sopts.opt.max_iters = 150;
        let fit = fit_spgp(&ts.data, 16, seed, &sopts).unwrap();
        let hyper = fit.model.hyper().clone();
        // Learned response in the two signal regimes.
        let (mut band_pred, mut band_n, mut ali_pred, mut ali_n) = (0.0, 0usize, 0.0, 0usize);
        for i in (0..n).step_by(5) {
            let b = bin_of(i);
            if b == 1 || b == 3 {
                let row: Vec<f64> = (0..6).map(|j| inputs[(i, j)]).collect();
                let (mu, _) = fit.model.predict(&row).unwrap();
                if b == 1 {
                    band_pred += mu;
                    band_n += 1;
                } else {
                    ali_pred += mu;
                    ali_n += 1;
                }
            }
        }
        let hyb =
            HybridModel { params: cal.params.clone(), corrector: Corrector::Sparse(fit.model) };
        let run = rollout(&hyb, &init0, eval.forcing).unwrap();
        let r = rmse_vs_obs(&run.theta_top, eval.observations);
        println!(
            "  fit s={seed}: sig={:.1e} noise={:.1e} band_mu={:+.1e} ali_mu={:+.1e} rmse={:.4} ratio={:.3}",
            hyper.signal_variance.sqrt(),
            hyper.noise_variance.sqrt(),
            if band_n > 0 { band_pred / band_n as f64 } else { f64::NAN },
            if ali_n > 0 { ali_pred / ali_n as f64 } else { f64::NAN },
            r,
            r / pbm_rmse
        );
    }
}

fn main() {
    let which: Vec<String> = std::env::args().skip(1).collect();
    let has = |s: &str| which.is_empty() || which.iter().any(|w| w == s);

    if has("default") {
        probe("DEFAULT", &WeatherConfig::default(), &truth_params(), 0.005);
        probe("DEFAULT", &WeatherConfig::default(), &truth_params(), 0.0);
    }
    if has("d") {
        // D: cold quiet winter, small pack, fast truth melt.
        let weather = WeatherConfig {
            t_mean_c: 6.0,
            t_seasonal_amp_c: 12.0,
            t_diurnal_amp_c: 2.5,
            t_noise_sd_c: 1.2,
            t_noise_corr_days: 2.5,
            wet_intensity_mm: 0.35,
            ..WeatherConfig::default()
        };
        let truth = PbmParams { degree_day_factor: 0.4, ..truth_params() };
        probe("D small-pack", &weather, &truth, 0.005);
        probe("D small-pack", &weather, &truth, 0.0);
    }
}
