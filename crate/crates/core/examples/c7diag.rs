//! One-fold deep diagnostic of the default acceptance scenario.

use hpbm_core::calibration::{calibrate_pbm, CalibrationSpec, SceConfig};
use hpbm_core::hybrid::{
    build_training_set, equilibrate_unobserved, rollout, Corrector, EquilibrationOptions,
    HybridModel, SegmentRef,
};
use hpbm_core::pbm::{pbm_step, PbmParams, PbmState};
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

fn main() {
    let weather = WeatherConfig::default();
    let truth = truth_params();
    let site = generate_synthetic_site(7, 4, &truth, 0.005, &weather).unwrap();
    let spy = weather.days_per_year * 48;
    let n_total = site.forcing.len();

    // Truth state trajectory (for the aliasing diagnostic only).
    let mut truth_states = Vec::with_capacity(n_total + 1);
    truth_states.push(site.initial_state);
    for t in 0..n_total {
        let (next, _) = pbm_step(&truth_states[t], &site.forcing[t], &truth);
        truth_states.push(next);
    }

    // Fold 0: train on years 1..4.
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
    let t0 = std::time::Instant::now();
    let cal = calibrate_pbm(&PbmParams::default(), &CalibrationSpec::default(), &[train], &sce)
        .unwrap();
    println!(
        "calibration: {:.1}s, rmse={:.4}, evals={}",
        t0.elapsed().as_secs_f64(),
        cal.rmse,
        cal.outcome.evaluations
    );
    println!(
        "  infil={:.3} perc={:.4} etp={:.3} melt_thresh={:.3}",
        cal.params.infiltration_rate_max_mm,
        cal.params.percolation_coeff,
        cal.params.et_partition,
        cal.params.melt_threshold_c
    );

    let opts = EquilibrationOptions::default();
    let eq = equilibrate_unobserved(&train, &cal.params, &opts).unwrap();
    let eval_init_state = eq.states[0];

    // PBM baseline on held-out year 0.
    let pbm_model = HybridModel::uncorrected(cal.params.clone());
    let mut init0 = eval_init_state;
    if let Some(first) = eval.observations.iter().flatten().next() {
        init0.theta_top = *first;
    }
    let pbm_run = rollout(&pbm_model, &init0, eval.forcing).unwrap();
    let pbm_rmse = rmse_vs_obs(&pbm_run.theta_top, eval.observations);
    println!("pbm held-out rmse = {:.4}", pbm_rmse);

    // Perfect physics-difference corrector, closed loop on year 0.
    // delta = truth one-step theta_top minus calibrated one-step theta_top
    // from the SAME state: exactly the structural error the GP regresses on.
    {
        let mut state = init0;
        let mut theta = vec![state.theta_top];
        for t in 0..eval.forcing.len() {
            let u = &eval.forcing[t];
            let (cal_next, _) = pbm_step(&state, u, &cal.params);
            let (truth_next, _) = pbm_step(&state, u, &truth);
            let delta = truth_next.theta_top - cal_next.theta_top;
            let mut next = cal_next;
            next.theta_top = (next.theta_top + delta)
                .clamp(cal.params.theta_residual, cal.params.theta_saturation);
            theta.push(next.theta_top);
            state = next;
        }
        println!(
            "perfect-corrector held-out rmse = {:.4} (ratio {:.3})",
            rmse_vs_obs(&theta, eval.observations),
            rmse_vs_obs(&theta, eval.observations) / pbm_rmse
        );
    }

    // Training set and residual structure by regime.
    let ts = build_training_set(&[train], &cal.params, &opts).unwrap();
    let n = ts.data.n();
    println!("training pairs: {n}");
    let inputs = ts.data.inputs();
    let targets = ts.data.targets();

    // Feature order: theta_lower, swe, precip, temp, pet, theta_top.
    let bin_of = |i: usize| -> usize {
        let swe = inputs[(i, 1)];
        let temp = inputs[(i, 3)];
        let truth_swe = truth_states[ts.provenance[i].timestep].swe_mm;
        if temp <= cal.params.melt_threshold_c.min(0.0) {
            0 // cold: no melt anywhere
        } else if swe > 0.5 {
            1 // model still has snow: learnable melt regime
        } else if truth_swe > 0.5 {
            2 // model lost its snow but truth still melting: aliased
        } else {
            3 // snow-free
        }
    };
    let labels = ["cold", "melt(model swe>0)", "aliased(truth swe>0)", "snow-free"];
    let mut count = [0usize; 4];
    let mut sum = [0.0f64; 4];
    let mut sumsq = [0.0f64; 4];
    for i in 0..n {
        let b = bin_of(i);
        count[b] += 1;
        sum[b] += targets[i];
        sumsq[b] += targets[i] * targets[i];
    }
    for b in 0..4 {
        if count[b] == 0 {
            continue;
        }
        let mean = sum[b] / count[b] as f64;
        let var = sumsq[b] / count[b] as f64 - mean * mean;
        println!(
            "  {:<22} n={:>6} mean={:+.2e} std={:.2e}",
            labels[b],
            count[b],
            mean,
            var.sqrt()
        );
    }

    // SPGP fits across budgets and restarts; per-bin learned response.
    for (m, iters, seed) in [
        (16usize, 500usize, 40u64),
        (16, 150, 40),
        (16, 150, 41),
        (16, 150, 42),
        (16, 60, 40),
        (16, 60, 41),
        (8, 150, 40),
        (8, 150, 41),
        (8, 60, 40),
    ] {
        let mut sopts = SpgpOptions::default();
        sopts.opt.max_iters = iters;
        let t0 = std::time::Instant::now();
        let fit = fit_spgp(&ts.data, m, seed, &sopts).unwrap();
        let model = fit.model;
        let hyper = model.hyper();
        let mut pred_sum = [0.0f64; 4];
        // Predict on a stride to keep this cheap.
        let mut pred_count = [0usize; 4];
        for i in (0..n).step_by(7) {
            let row: Vec<f64> = (0..6).map(|j| inputs[(i, j)]).collect();
            let (mu, _) = model.predict(&row).unwrap();
            let b = bin_of(i);
            pred_sum[b] += mu;
            pred_count[b] += 1;
        }
        println!(
            "fit m={m} iters={iters}: {:.1}s sig_sd={:.2e} noise_sd={:.2e} conv={}",
            t0.elapsed().as_secs_f64(),
            hyper.signal_variance.sqrt(),
            hyper.noise_variance.sqrt(),
            fit.opt.converged
        );
        println!("  lengthscales: {:?}", hyper.lengthscales.iter().map(|l| (l * 100.0).round() / 100.0).collect::<Vec<_>>());
        for b in 0..4 {
            if pred_count[b] == 0 {
                continue;
            }
            println!(
                "  {:<22} pred_mean={:+.2e} (resid mean {:+.2e})",
                labels[b],
                pred_sum[b] / pred_count[b] as f64,
                sum[b] / count[b] as f64
            );
        }
        let hyb = HybridModel { params: cal.params.clone(), corrector: Corrector::Sparse(model) };
        let run = rollout(&hyb, &init0, eval.forcing).unwrap();
        println!(
            "  held-out rmse = {:.4} (ratio {:.3}), clips={}",
            rmse_vs_obs(&run.theta_top, eval.observations),
            rmse_vs_obs(&run.theta_top, eval.observations) / pbm_rmse,
            run.clip_count
        );
    }
}
