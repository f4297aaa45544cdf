//! Geometry scan for the winter-band scenario: quiet cold winters where the
//! threshold model holds its pack until one spring dump while the degree-day
//! truth trickle-melts through sub-threshold afternoons. No calibration, one
//! simulated chain per candidate model, structural metrics only.

use hpbm_core::pbm::{pbm_run, pbm_step, PbmParams, PbmState};
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

fn main() {
    let spy = 365 * 48;
    for t_mean in [4.0f64, 5.0] {
        for diurnal in [2.0f64, 3.0] {
            for noise_sd in [0.8f64, 1.4] {
                for wet in [0.4f64, 0.7] {
                    for ddf in [0.15f64, 0.25] {
                        let weather = WeatherConfig {
                            t_mean_c: t_mean,
                            t_seasonal_amp_c: 7.0,
                            t_diurnal_amp_c: diurnal,
                            t_noise_sd_c: noise_sd,
                            t_noise_corr_days: 2.0,
                            wet_intensity_mm: wet,
                            ..WeatherConfig::default()
                        };
                        let mut truth = truth_params();
                        truth.degree_day_factor = ddf;
                        let site =
                            generate_synthetic_site(7, 4, &truth, 0.005, &weather).unwrap();

                        // Truth chain for pack structure.
                        let mut ts = Vec::with_capacity(site.forcing.len() + 1);
                        ts.push(site.initial_state);
                        for t in 0..site.forcing.len() {
                            let (next, _) = pbm_step(&ts[t], &site.forcing[t], &truth);
                            ts.push(next);
                        }

                        // Flawed-threshold chains at a high and a low threshold,
                        // other parameters at truth values: a cheap preview of
                        // which melt strategy calibration would prefer.
                        let mut high = truth.clone();
                        high.melt_mode = hpbm_core::pbm::MeltMode::FlawedThreshold;
                        high.melt_threshold_c = 2.9;
                        let mut low = high.clone();
                        low.melt_threshold_c = 0.0;
                        let run_h = pbm_run(&site.initial_state, &site.forcing, &high).unwrap();
                        let run_l = pbm_run(&site.initial_state, &site.forcing, &low).unwrap();
                        let rmse_h = rmse_vs_obs(run_h.theta_top(), &site.observations);
                        let rmse_l = rmse_vs_obs(run_l.theta_top(), &site.observations);

                        // Per-step regime accounting against the high model.
                        let mut pack_peak = 0.0f64;
                        let mut band = 0usize; // model pack, truth pack, T in (0, 2.9)
                        let mut stale = 0usize; // model pack only (truth done), T in band
                        let mut aliased = 0usize; // truth pack only, model dumped
                        let mut winter_dumps = 0usize; // dump events with truth pack alive
                        let mut spring_dumps = 0usize;
                        let mut dumped_mm = 0.0f64;
                        let states_h = run_h.states();
                        for t in 0..site.forcing.len() {
                            let temp = site.forcing[t].air_temp_c;
                            let mswe = states_h[t].swe_mm;
                            let tswe = ts[t].swe_mm;
                            pack_peak = pack_peak.max(tswe);
                            let melted = mswe - states_h[t + 1].swe_mm
                                + if temp < 0.0 { site.forcing[t].precip_mm } else { 0.0 };
                            if melted > 1.0 {
                                if tswe > 0.5 {
                                    winter_dumps += 1;
                                } else {
                                    spring_dumps += 1;
                                }
                                dumped_mm += melted;
                            }
                            if temp > 0.0 && temp <= 2.9 {
                                match (mswe > 0.5, tswe > 0.5) {
                                    (true, true) => band += 1,
                                    (true, false) => stale += 1,
                                    _ => {}
                                }
                            }
                            if mswe <= 0.5 && tswe > 0.5 {
                                aliased += 1;
                            }
                        }
                        let years = (site.forcing.len() / spy) as f64;
                        println!(
                            "tm={t_mean} di={diurnal} sd={noise_sd} wet={wet} ddf={ddf}: \
                             pack={:.0}mm band={:.0}/y stale={:.0}/y alias={:.0}/y \
                             dumps(w/s)={:.1}/{:.1} dump={:.0}mm/y rmse(hi/lo)={:.4}/{:.4}",
                            pack_peak,
                            band as f64 / years,
                            stale as f64 / years,
                            aliased as f64 / years,
                            winter_dumps as f64 / years,
                            spring_dumps as f64 / years,
                            dumped_mm / years,
                            rmse_h,
                            rmse_l
                        );
                    }
                }
            }
        }
    }
}
