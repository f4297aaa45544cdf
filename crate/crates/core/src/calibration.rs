//! Shuffled complex evolution (SCE) for bounded minimization, and the
//! closed-loop calibration of bucket-model parameters against observations.
//!
//! SCE maintains a population split into complexes that evolve independently
//! through competitive simplex steps (reflection, contraction, random
//! replacement) and are periodically shuffled together. It needs no
//! gradients, which matters here: the calibration objective is a closed-loop
//! RMSE through thresholded physics.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::hybrid::{HybridModel, SegmentRef};
use crate::pbm::PbmParams;

#[derive(Debug, Clone)]
pub struct SceConfig {
    /// Number of complexes (≥ 2).
    pub n_complexes: usize,
    /// Points per complex; 0 means the standard 2·dim+1.
    pub points_per_complex: usize,
    /// Evolution steps per complex between shuffles; 0 means 2·dim+1.
    pub cce_steps: usize,
    /// Hard budget on objective evaluations.
    pub max_evals: usize,
    /// Stop when the best value improves by less than this relative amount
    /// over `tol_window` consecutive shuffles.
    pub rel_tol: f64,
    pub tol_window: usize,
    pub seed: u64,
}

impl Default for SceConfig {
    fn default() -> Self {
        Self {
            n_complexes: 4,
            points_per_complex: 0,
            cce_steps: 0,
            max_evals: 10_000,
            rel_tol: 1e-6,
            tol_window: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TracePoint {
    pub shuffle: usize,
    pub evaluations: usize,
    pub best: f64,
}

#[derive(Debug, Clone)]
pub struct SceOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub shuffles: usize,
    /// Best-so-far after initialization and after each shuffle;
    /// non-increasing by construction.
    pub trace: Vec<TracePoint>,
    pub converged: bool,
}

/// Mirror a coordinate back inside [lo, hi]; clamps as a last resort for
/// points far outside.
fn reflect_into(mut v: f64, lo: f64, hi: f64) -> f64 {
    if !v.is_finite() {
        return lo;
    }
    for _ in 0..8 {
        if v < lo {
            v = lo + (lo - v);
        } else if v > hi {
            v = hi - (v - hi);
        } else {
            return v;
        }
    }
    v.clamp(lo, hi)
}

struct Member {
    x: Vec<f64>,
    value: f64,
}

/// Minimize `f` over the box [lower, upper].
///
/// Non-finite objective values are treated as worst-possible; if more than
/// half of the initial population evaluates non-finite the setup is rejected.
pub fn sce_minimize<F>(
    mut f: F,
    lower: &[f64],
    upper: &[f64],
    cfg: &SceConfig,
) -> Result<SceOutcome>
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = lower.len();
    if dim == 0 || upper.len() != dim {
        return Err(Error::SearchSetup("empty or mismatched bounds".into()));
    }
    for j in 0..dim {
        if !(lower[j].is_finite() && upper[j].is_finite() && lower[j] < upper[j]) {
            return Err(Error::SearchSetup(format!(
                "need lower < upper in every dimension, got [{}, {}] at {j}",
                lower[j], upper[j]
            )));
        }
    }
    if cfg.n_complexes < 2 {
        return Err(Error::SearchSetup(format!(
            "need at least 2 complexes, got {}",
            cfg.n_complexes
        )));
    }
    let per_complex = if cfg.points_per_complex == 0 {
        2 * dim + 1
    } else {
        cfg.points_per_complex
    };
    let cce_steps = if cfg.cce_steps == 0 { 2 * dim + 1 } else { cfg.cce_steps };
    let population = cfg.n_complexes * per_complex;
    if population < dim + 2 {
        return Err(Error::SearchSetup(format!(
            "population {population} below dim+2 = {}",
            dim + 2
        )));
    }
    if cfg.max_evals < population {
        return Err(Error::SearchSetup(format!(
            "evaluation budget {} cannot even initialize a population of {population}",
            cfg.max_evals
        )));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut evals = 0usize;
    let sanitize = |v: f64| if v.is_finite() { v } else { f64::INFINITY };

    let uniform_point = |rng: &mut ChaCha12Rng| -> Vec<f64> {
        (0..dim).map(|j| rng.random_range(lower[j]..=upper[j])).collect()
    };

    // Initial population.
    let mut members: Vec<Member> = Vec::with_capacity(population);
    let mut nonfinite = 0usize;
    for _ in 0..population {
        let x = uniform_point(&mut rng);
        let raw = f(&x);
        evals += 1;
        if !raw.is_finite() {
            nonfinite += 1;
        }
        members.push(Member { x, value: sanitize(raw) });
    }
    if 2 * nonfinite > population {
        return Err(Error::SearchSetup(format!(
            "objective non-finite at {nonfinite} of {population} initial points"
        )));
    }
    members.sort_by(|a, b| a.value.total_cmp(&b.value));

    let mut best = Member { x: members[0].x.clone(), value: members[0].value };
    let mut trace = vec![TracePoint { shuffle: 0, evaluations: evals, best: best.value }];
    let mut best_by_shuffle = vec![best.value];
    let mut shuffles = 0usize;
    let mut converged = false;

    // Triangular selection weights over ranks within a complex.
    let tri_weights: Vec<f64> = (0..per_complex).map(|i| (per_complex - i) as f64).collect();
    let simplex_size = (dim + 1).min(per_complex);

    'outer: while evals < cfg.max_evals {
        // Rank striping: member j of the sorted population goes to complex
        // j mod n_complexes.
        let mut complexes: Vec<Vec<Member>> = (0..cfg.n_complexes).map(|_| Vec::new()).collect();
        for (j, m) in members.drain(..).enumerate() {
            complexes[j % cfg.n_complexes].push(m);
        }

        for complex in complexes.iter_mut() {
            for _ in 0..cce_steps {
                if evals >= cfg.max_evals {
                    break;
                }
                // Draw a simplex without replacement, biased toward good ranks.
                let mut available: Vec<usize> = (0..complex.len()).collect();
                let mut chosen: Vec<usize> = Vec::with_capacity(simplex_size);
                for _ in 0..simplex_size {
                    let total: f64 = available.iter().map(|i| tri_weights[*i]).sum();
                    let mut u = rng.random_range(0.0..total);
                    let mut pick = available.len() - 1;
                    for (slot, i) in available.iter().enumerate() {
                        u -= tri_weights[*i];
                        if u <= 0.0 {
                            pick = slot;
                            break;
                        }
                    }
                    chosen.push(available.remove(pick));
                }
                chosen.sort_by(|a, b| complex[*a].value.total_cmp(&complex[*b].value));
                let worst = *chosen.last().unwrap();

                // Centroid of the simplex without its worst member.
                let mut centroid = vec![0.0; dim];
                for i in &chosen[..simplex_size - 1] {
                    for j in 0..dim {
                        centroid[j] += complex[*i].x[j];
                    }
                }
                for c in centroid.iter_mut() {
                    *c /= (simplex_size - 1) as f64;
                }

                let mut try_replace = |x: Vec<f64>,
                                       complex: &mut Vec<Member>,
                                       evals: &mut usize,
                                       best: &mut Member|
                 -> bool {
                    let raw = f(&x);
                    *evals += 1;
                    let value = sanitize(raw);
                    if value < best.value {
                        best.x = x.clone();
                        best.value = value;
                    }
                    if value < complex[worst].value {
                        complex[worst] = Member { x, value };
                        true
                    } else {
                        false
                    }
                };

                // Reflection through the centroid.
                let reflected: Vec<f64> = (0..dim)
                    .map(|j| reflect_into(2.0 * centroid[j] - complex[worst].x[j], lower[j], upper[j]))
                    .collect();
                if try_replace(reflected, complex, &mut evals, &mut best) {
                    complex.sort_by(|a, b| a.value.total_cmp(&b.value));
                    continue;
                }
                if evals >= cfg.max_evals {
                    break;
                }
                // Contraction halfway to the worst point.
                let contracted: Vec<f64> = (0..dim)
                    .map(|j| 0.5 * (centroid[j] + complex[worst].x[j]))
                    .collect();
                if try_replace(contracted, complex, &mut evals, &mut best) {
                    complex.sort_by(|a, b| a.value.total_cmp(&b.value));
                    continue;
                }
                if evals >= cfg.max_evals {
                    break;
                }
                // Give up on this simplex: replace the worst member with a
                // random point from the hypercube bounding the complex, so
                // mutation stays local once the complex has contracted.
                let fresh: Vec<f64> = (0..dim)
                    .map(|j| {
                        let mut lo = f64::INFINITY;
                        let mut hi = f64::NEG_INFINITY;
                        for m in complex.iter() {
                            lo = lo.min(m.x[j]);
                            hi = hi.max(m.x[j]);
                        }
                        rng.random_range(lo..=hi)
                    })
                    .collect();
                let raw = f(&fresh);
                evals += 1;
                let value = sanitize(raw);
                if value < best.value {
                    best.x = fresh.clone();
                    best.value = value;
                }
                complex[worst] = Member { x: fresh, value };
                complex.sort_by(|a, b| a.value.total_cmp(&b.value));
            }
        }

        // Shuffle: merge and re-sort.
        members = complexes.into_iter().flatten().collect();
        members.sort_by(|a, b| a.value.total_cmp(&b.value));
        shuffles += 1;
        trace.push(TracePoint { shuffle: shuffles, evaluations: evals, best: best.value });
        best_by_shuffle.push(best.value);

        if best_by_shuffle.len() > cfg.tol_window {
            let then = best_by_shuffle[best_by_shuffle.len() - 1 - cfg.tol_window];
            let now = best.value;
            if then.is_finite() && (then - now) <= cfg.rel_tol * then.abs().max(1e-12) {
                converged = true;
                break 'outer;
            }
        }
    }

    Ok(SceOutcome {
        x: best.x,
        value: best.value,
        evaluations: evals,
        shuffles,
        trace,
        converged,
    })
}

/// Bucket-model parameters exposed to calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalParam {
    InfiltrationRateMax,
    PercolationCoeff,
    EtPartition,
    MeltThreshold,
    DegreeDayFactor,
}

impl CalParam {
    pub fn name(&self) -> &'static str {
        match self {
            CalParam::InfiltrationRateMax => "infiltration_rate_max_mm",
            CalParam::PercolationCoeff => "percolation_coeff",
            CalParam::EtPartition => "et_partition",
            CalParam::MeltThreshold => "melt_threshold_c",
            CalParam::DegreeDayFactor => "degree_day_factor",
        }
    }
}

/// Which parameters move during calibration, and inside which bounds.
#[derive(Debug, Clone)]
pub struct CalibrationSpec {
    pub entries: Vec<(CalParam, f64, f64)>,
}

impl Default for CalibrationSpec {
    /// The flux parameters the observations can actually inform. Soil
    /// constants (porosity, depths) are treated as known site properties.
    fn default() -> Self {
        Self {
            entries: vec![
                (CalParam::InfiltrationRateMax, 0.5, 8.0),
                (CalParam::PercolationCoeff, 0.005, 0.2),
                (CalParam::EtPartition, 0.2, 0.9),
                (CalParam::MeltThreshold, -2.0, 3.0),
            ],
        }
    }
}

impl CalibrationSpec {
    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn lower(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.1).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.2).collect()
    }

    pub fn apply(&self, base: &PbmParams, x: &[f64]) -> PbmParams {
        let mut p = base.clone();
        for ((param, _, _), v) in self.entries.iter().zip(x) {
            match param {
                CalParam::InfiltrationRateMax => p.infiltration_rate_max_mm = *v,
                CalParam::PercolationCoeff => p.percolation_coeff = *v,
                CalParam::EtPartition => p.et_partition = *v,
                CalParam::MeltThreshold => p.melt_threshold_c = *v,
                CalParam::DegreeDayFactor => p.degree_day_factor = *v,
            }
        }
        p
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub params: PbmParams,
    /// Closed-loop RMSE of the calibrated model on the training segments.
    pub rmse: f64,
    pub outcome: SceOutcome,
}

/// Closed-loop RMSE of a parameter set over segments, each started from the
/// parameter set's own free-running spin-up: the standard protocol for
/// calibrating plain physics, where no corrector input consistency is at
/// stake.
pub fn closed_loop_rmse(params: &PbmParams, segments: &[SegmentRef]) -> Result<f64> {
    crate::training::dynamical_rmse(
        &HybridModel::uncorrected(params.clone()),
        segments,
        &crate::training::RolloutInit::SpinUp,
    )
}

/// Calibrate the spec'd parameter subset by minimizing closed-loop RMSE over
/// the training segments with SCE.
pub fn calibrate_pbm(
    base: &PbmParams,
    spec: &CalibrationSpec,
    segments: &[SegmentRef],
    cfg: &SceConfig,
) -> Result<CalibrationResult> {
    base.validate()?;
    if spec.entries.is_empty() {
        return Err(Error::SearchSetup("empty calibration spec".into()));
    }
    if segments.is_empty() || segments.iter().all(|s| s.forcing.is_empty()) {
        return Err(Error::SearchSetup("no training data designated".into()));
    }
    for seg in segments {
        seg.validate()?;
    }
    if !segments.iter().any(|s| s.observations.iter().any(|o| o.is_some())) {
        return Err(Error::SearchSetup("training segments carry no observations".into()));
    }

    let objective = |x: &[f64]| -> f64 {
        let candidate = spec.apply(base, x);
        if candidate.validate().is_err() {
            return f64::INFINITY;
        }
        closed_loop_rmse(&candidate, segments).unwrap_or(f64::INFINITY)
    };
    let outcome = sce_minimize(objective, &spec.lower(), &spec.upper(), cfg)?;
    let params = spec.apply(base, &outcome.x);
    Ok(CalibrationResult { params, rmse: outcome.value, outcome })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    #[test]
    fn minimizes_quadratic_within_budget() {
        let cfg = SceConfig { max_evals: 2000, seed: 5, ..SceConfig::default() };
        let out = sce_minimize(sphere, &[-5.0; 5], &[5.0; 5], &cfg).unwrap();
        assert!(out.value <= 1e-4, "value {}", out.value);
        assert!(out.evaluations <= 2000);
    }

    #[test]
    fn minimizes_rosenbrock() {
        let rosen = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let cfg = SceConfig { max_evals: 10_000, seed: 11, ..SceConfig::default() };
        let out = sce_minimize(rosen, &[-5.0, -5.0], &[10.0, 10.0], &cfg).unwrap();
        assert!(out.value <= 1e-3, "value {}", out.value);
    }

    #[test]
    fn trace_is_monotone_and_within_bounds() {
        let cfg = SceConfig { max_evals: 1500, seed: 3, ..SceConfig::default() };
        let mut visited: Vec<Vec<f64>> = Vec::new();
        let out = {
            let f = |x: &[f64]| {
                visited.push(x.to_vec());
                (x[0] - 0.3).powi(2) + (x[1] + 1.1).powi(2)
            };
            sce_minimize(f, &[-2.0, -2.0], &[2.0, 2.0], &cfg).unwrap()
        };
        for w in out.trace.windows(2) {
            assert!(w[1].best <= w[0].best);
            assert!(w[1].evaluations > w[0].evaluations);
        }
        for x in &visited {
            assert!(x.iter().all(|v| (-2.0..=2.0).contains(v)), "escaped bounds: {x:?}");
        }
        assert_eq!(visited.len(), out.evaluations);
    }

    #[test]
    fn rejects_bad_setups() {
        let cfg = SceConfig::default();
        assert!(sce_minimize(sphere, &[], &[], &cfg).is_err());
        assert!(sce_minimize(sphere, &[1.0], &[0.0], &cfg).is_err());
        let one_complex = SceConfig { n_complexes: 1, ..SceConfig::default() };
        assert!(sce_minimize(sphere, &[-1.0], &[1.0], &one_complex).is_err());
        let tiny_budget = SceConfig { max_evals: 3, ..SceConfig::default() };
        assert!(sce_minimize(sphere, &[-1.0], &[1.0], &tiny_budget).is_err());
    }

    #[test]
    fn mostly_nonfinite_objective_is_rejected() {
        let f = |x: &[f64]| if x[0] > 0.9 { x[0] } else { f64::NAN };
        let cfg = SceConfig { max_evals: 500, seed: 1, ..SceConfig::default() };
        match sce_minimize(f, &[0.0], &[1.0], &cfg) {
            Err(Error::SearchSetup(msg)) => assert!(msg.contains("non-finite")),
            other => panic!("expected setup rejection, got {other:?}"),
        }
    }

    #[test]
    fn identical_seeds_identical_outcomes() {
        let cfg = SceConfig { max_evals: 800, seed: 42, ..SceConfig::default() };
        let a = sce_minimize(sphere, &[-3.0; 3], &[3.0; 3], &cfg).unwrap();
        let b = sce_minimize(sphere, &[-3.0; 3], &[3.0; 3], &cfg).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.evaluations, b.evaluations);
    }

    #[test]
    fn calibration_improves_on_perturbed_params() {
        use crate::synth::{generate_synthetic_site, truth_params, WeatherConfig};

        let weather = WeatherConfig { days_per_year: 40, ..WeatherConfig::default() };
        let site = generate_synthetic_site(77, 1, &truth_params(), 0.002, &weather).unwrap();
        let seg = SegmentRef {
            forcing: &site.forcing,
            observations: &site.observations,
            start_index: 0,
        };

        // Start from defaults, which differ from the generating parameters.
        let base = PbmParams { melt_mode: crate::pbm::MeltMode::DegreeDay, ..PbmParams::default() };
        let before = closed_loop_rmse(&base, &[seg]).unwrap();

        let cfg = SceConfig {
            n_complexes: 2,
            max_evals: 150,
            tol_window: 3,
            seed: 9,
            ..SceConfig::default()
        };
        let result = calibrate_pbm(&base, &CalibrationSpec::default(), &[seg], &cfg).unwrap();
        assert!(result.rmse < before, "calibrated {} vs base {before}", result.rmse);
        // Untouched parameters stay at their base values.
        assert_eq!(result.params.top_depth_mm, base.top_depth_mm);
        assert_eq!(result.params.theta_saturation, base.theta_saturation);
    }

    #[test]
    fn calibration_rejects_empty_designation() {
        let base = PbmParams::default();
        let spec = CalibrationSpec::default();
        let cfg = SceConfig::default();
        assert!(calibrate_pbm(&base, &spec, &[], &cfg).is_err());
        let forcing: Vec<crate::pbm::Forcing> = vec![];
        let obs: Vec<Option<f64>> = vec![];
        let seg = SegmentRef { forcing: &forcing, observations: &obs, start_index: 0 };
        assert!(calibrate_pbm(&base, &spec, &[seg], &cfg).is_err());
    }
}
