//! Representation-ceiling probe: condition a sparse corrector at hand-picked
//! hyperparameters and stratified pseudo-inputs (no optimization) and measure
//! the closed-loop ratio. Separates "no SPGP in the class can do it" from
//! "the optimizer cannot find it".

use hpbm_core::calibration::{calibrate_pbm, CalibrationSpec, SceConfig};
use hpbm_core::dataset::Dataset;
use hpbm_core::hybrid::{
    build_training_set, equilibrate_unobserved, rollout, Corrector, EquilibrationOptions,
    HybridModel, SegmentRef,
};
use hpbm_core::kernel::KernelHyperparams;
use hpbm_core::pbm::{pbm_step, PbmParams};
use hpbm_core::spgp::{condition_spgp, fit_spgp_init, InducingSet, SpgpInit, SpgpOptions};
use hpbm_core::synth::{generate_synthetic_site, truth_params, WeatherConfig};
use nalgebra::DMatrix;

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
    let args: Vec<String> = std::env::args().collect();
    let has = |k: &str| args.iter().any(|a| a == k);

    let mut weather = WeatherConfig::default();
    let mut truth = truth_params();
    if has("d") {
        weather.t_mean_c = 6.0;
        weather.t_seasonal_amp_c = 12.0;
        weather.t_diurnal_amp_c = 2.5;
        weather.t_noise_sd_c = 1.2;
        weather.t_noise_corr_days = 2.5;
        weather.wet_intensity_mm = 0.35;
        truth.degree_day_factor = 0.4;
    }
    let site = generate_synthetic_site(7, 4, &truth, 0.005, &weather).unwrap();
    let spy = weather.days_per_year * 48;
    let n_total = site.forcing.len();

    let mut truth_states = Vec::with_capacity(n_total + 1);
    truth_states.push(site.initial_state);
    for t in 0..n_total {
        let (next, _) = pbm_step(&truth_states[t], &site.forcing[t], &truth);
        truth_states.push(next);
    }

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

    let sce = SceConfig { seed: 11, ..SceConfig::default() };
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
    println!("pbm held-out rmse = {:.4}", pbm_rmse);

    // Training pairs, with a hard trim of catastrophic one-step residuals
    // (threshold-dump steps) that act as leverage points.
    let ts = build_training_set(&[train], &cal.params, &opts).unwrap();
    let inputs = ts.data.inputs();
    let targets = ts.data.targets();
    let trim = 0.03;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut steps: Vec<usize> = Vec::new();
    for i in 0..ts.data.n() {
        if targets[i].abs() > trim {
            continue;
        }
        rows.push((0..6).map(|j| inputs[(i, j)]).collect());
        ys.push(targets[i]);
        steps.push(ts.provenance[i].timestep);
    }
    let dropped = ts.data.n() - rows.len();
    println!("training pairs: {} (trimmed {} > {:.2})", rows.len(), dropped, trim);
    let data = Dataset::from_rows(&rows, &ys).unwrap();
    let n = data.n();

    // Bins on the trimmed set. Feature order: th_lower, swe, precip, T, pet, th_top.
    let bin_of = |i: usize| -> usize {
        let swe = rows[i][1];
        let temp = rows[i][3];
        let truth_swe = truth_states[steps[i]].swe_mm;
        if temp <= 0.0 {
            0
        } else if swe > 0.5 {
            1 // band: model holds pack, truth melting
        } else if truth_swe > 0.5 {
            2 // aliased: model dumped, truth still melting
        } else {
            3 // snow-free warm
        }
    };
    let labels = ["cold", "band", "aliased", "warm"];
    let mut count = [0usize; 4];
    let mut sum = [0.0f64; 4];
    let mut by_bin: Vec<Vec<usize>> = vec![Vec::new(); 4];
    for i in 0..n {
        let b = bin_of(i);
        count[b] += 1;
        sum[b] += ys[i];
        by_bin[b].push(i);
    }
    for b in 0..4 {
        println!(
            "  {:<8} n={:>6} mean={:+.2e}",
            labels[b],
            count[b],
            sum[b] / count[b].max(1) as f64
        );
    }

    // Stratified pseudo-inputs: spread within each bin by even striding.
    let stratified = |quota: [usize; 4]| -> InducingSet {
        let mut picks: Vec<usize> = Vec::new();
        for b in 0..4 {
            let q = quota[b].min(by_bin[b].len());
            if q == 0 {
                continue;
            }
            for k in 0..q {
                picks.push(by_bin[b][k * by_bin[b].len() / q]);
            }
        }
        let mut z = DMatrix::zeros(picks.len(), 6);
        for (r, &i) in picks.iter().enumerate() {
            for j in 0..6 {
                z[(r, j)] = rows[i][j];
            }
        }
        InducingSet::new(z).unwrap()
    };
    let z16 = stratified([2, 6, 6, 2]);
    let z24 = stratified([4, 8, 8, 4]);

    // Hand hyperparameter grid (lengthscales in standardized units).
    let noise_sd = 7.05e-3;
    let ls_sets: [(&str, [f64; 6]); 3] = [
        ("L1", [0.7, 1.0, 2.0, 1.0, 1.5, 0.7]),
        ("L2", [0.4, 0.8, 3.0, 0.7, 1.0, 0.4]),
        ("L3", [1.0, 1.0, 1.0, 1.0, 1.0, 1.0]),
    ];
    for &(name, ls) in &ls_sets {
        for sf_sd in [2e-3f64, 4e-3, 8e-3] {
            for (zname, z) in [("z16", &z16), ("z24", &z24)] {
                let hyper =
                    KernelHyperparams::new(sf_sd * sf_sd, ls.to_vec(), noise_sd * noise_sd)
                        .unwrap();
                let model = condition_spgp(&data, &hyper, z, true).unwrap();
                let mut pred = [0.0f64; 4];
                let mut pc = [0usize; 4];
                for i in (0..n).step_by(7) {
                    let (mu, _) = model.predict(&rows[i]).unwrap();
                    let b = bin_of(i);
                    pred[b] += mu;
                    pc[b] += 1;
                }
                let hyb = HybridModel {
                    params: cal.params.clone(),
                    corrector: Corrector::Sparse(model),
                };
                let run = rollout(&hyb, &init0, eval.forcing).unwrap();
                let r = rmse_vs_obs(&run.theta_top, eval.observations);
                println!(
                    "{name} sf={:.0e} {zname}: band={:+.2e} ali={:+.2e} warm={:+.2e} ratio={:.3}",
                    sf_sd,
                    pred[1] / pc[1].max(1) as f64,
                    pred[2] / pc[2].max(1) as f64,
                    pred[3] / pc[3].max(1) as f64,
                    r / pbm_rmse
                );
            }
        }
    }

    // Does the optimizer hold or destroy a good starting point?
    if has("opt") {
        for (iters, sf_sd) in [(60usize, 4e-3f64), (150, 4e-3)] {
            let hyper = KernelHyperparams::new(
                sf_sd * sf_sd,
                ls_sets[0].1.to_vec(),
                noise_sd * noise_sd,
            )
            .unwrap();
            // fit_spgp_init interprets inducing in raw space.
            let init = SpgpInit { hyper: hyper.clone(), inducing: z24.clone() };
            let mut sopts = SpgpOptions::default();
            sopts.opt.max_iters = iters;
            let t0 = std::time::Instant::now();
            let fit = fit_spgp_init(&data, &init, &sopts).unwrap();
            let model = fit.model;
            let mut pred = [0.0f64; 4];
            let mut pc = [0usize; 4];
            for i in (0..n).step_by(7) {
                let (mu, _) = model.predict(&rows[i]).unwrap();
                let b = bin_of(i);
                pred[b] += mu;
                pc[b] += 1;
            }
            let sig = model.hyper().signal_variance.sqrt();
            let nsd = model.hyper().noise_variance.sqrt();
            let hyb =
                HybridModel { params: cal.params.clone(), corrector: Corrector::Sparse(model) };
            let run = rollout(&hyb, &init0, eval.forcing).unwrap();
            let r = rmse_vs_obs(&run.theta_top, eval.observations);
            println!(
                "opt from L1/z24 iters={iters}: {:.0}s sig={:.1e} noise={:.1e} band={:+.2e} ali={:+.2e} ratio={:.3}",
                t0.elapsed().as_secs_f64(),
                sig,
                nsd,
                pred[1] / pc[1].max(1) as f64,
                pred[2] / pc[2].max(1) as f64,
                r / pbm_rmse
            );
        }
    }
}
