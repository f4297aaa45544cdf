//! Hybrid model: bucket-model physics plus a GP correction on θ_top.
//!
//! The corrector is trained on one-step-ahead residuals under teacher
//! forcing: the observed θ_top is fed back each step, the bucket model
//! proposes the next value, and the GP learns the gap to the next
//! observation as a function of the full model input
//! v_t = (unobserved substate, forcing, observed θ_top).
//!
//! Because the GP has zero prior mean, the hybrid collapses to the plain
//! bucket model wherever the inputs are far from anything seen in training.

use nalgebra::DMatrix;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gp::ExactGpModel;
use crate::pbm::{pbm_run, pbm_step, Forcing, PbmParams, PbmState};
use crate::spgp::SpgpModel;

/// Model input layout fed to the corrector, in this order.
pub const FEATURE_NAMES: [&str; 6] =
    ["theta_lower", "swe_mm", "precip_mm", "air_temp_c", "pet_mm", "theta_top"];
pub const FEATURE_DIM: usize = 6;

/// Full model state at a step: bucket state plus the forcing acting over the
/// step that starts here.
#[derive(Debug, Clone, Copy)]
pub struct HybridState {
    pub pbm: PbmState,
    pub forcing: Forcing,
}

impl HybridState {
    /// Corrector input vector for this state, in [`FEATURE_NAMES`] order.
    pub fn features(&self) -> [f64; FEATURE_DIM] {
        [
            self.pbm.theta_lower,
            self.pbm.swe_mm,
            self.forcing.precip_mm,
            self.forcing.air_temp_c,
            self.forcing.pet_mm,
            self.pbm.theta_top,
        ]
    }
}

/// The additive correction model. `Zero` is the ablation: the hybrid output
/// equals the bucket model bit for bit. `Mixture` marginalizes over a
/// candidate pool with fixed weights, evaluated at the shared rolled-out
/// state.
#[derive(Debug, Clone)]
pub enum Corrector {
    Zero,
    Exact(ExactGpModel),
    Sparse(SpgpModel),
    Mixture(Vec<(f64, SpgpModel)>),
}

impl Corrector {
    /// Posterior (mean, variance) of the correction at input `v`. Rollouts
    /// apply only the mean. For a mixture the variance is the full mixture
    /// variance Σ wᵢ(σᵢ² + μᵢ²) − μ².
    pub fn correction(&self, v: &[f64]) -> Result<(f64, f64)> {
        match self {
            Corrector::Zero => Ok((0.0, 0.0)),
            Corrector::Exact(m) => m.predict(v),
            Corrector::Sparse(m) => m.predict(v),
            Corrector::Mixture(components) => {
                let mut mean = 0.0;
                let mut second = 0.0;
                // Zero-weight components are skipped outright so that one-hot
                // weights reproduce the single model bit for bit.
                for (w, m) in components {
                    if *w == 0.0 {
                        continue;
                    }
                    let (mu, var) = m.predict(v)?;
                    mean += w * mu;
                    second += w * (var + mu * mu);
                }
                Ok((mean, (second - mean * mean).max(0.0)))
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Corrector::Zero)
    }
}

#[derive(Debug, Clone)]
pub struct HybridModel {
    pub params: PbmParams,
    pub corrector: Corrector,
}

impl HybridModel {
    pub fn uncorrected(params: PbmParams) -> Self {
        Self { params, corrector: Corrector::Zero }
    }
}

/// Outcome of one hybrid step.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    /// GP mean applied to θ_top before clipping.
    pub correction: f64,
    /// Whether the corrected θ_top had to be clipped back into
    /// [θ_residual, θ_saturation].
    pub clipped: bool,
}

/// Advance the hybrid one step: bucket physics from `state`, then the GP
/// correction on θ_top evaluated at `state`'s model input. `forcing_next`
/// becomes the forcing of the returned state.
///
/// With a `Zero` corrector the returned bucket state is exactly the
/// `pbm_step` output, bit for bit: the correction adds literal 0.0 and the
/// clip is a no-op on in-range values.
pub fn hybrid_step(
    state: &HybridState,
    forcing_next: &Forcing,
    model: &HybridModel,
) -> Result<(HybridState, StepInfo)> {
    let (mut next, _) = pbm_step(&state.pbm, &state.forcing, &model.params);
    let (correction, _) = model.corrector.correction(&state.features())?;
    let corrected = next.theta_top + correction;
    let clipped_theta =
        corrected.clamp(model.params.theta_residual, model.params.theta_saturation);
    let clipped = clipped_theta != corrected;
    next.theta_top = clipped_theta;
    Ok((
        HybridState { pbm: next, forcing: *forcing_next },
        StepInfo { correction, clipped },
    ))
}

/// Closed-loop trajectory of θ_top (length `forcing.len() + 1`).
#[derive(Debug, Clone)]
pub struct Rollout {
    pub theta_top: Vec<f64>,
    pub clip_count: usize,
}

/// Run the hybrid closed-loop over a forcing series from `initial`.
pub fn rollout(model: &HybridModel, initial: &PbmState, forcing: &[Forcing]) -> Result<Rollout> {
    model.params.validate()?;
    initial.validate(&model.params)?;
    if forcing.is_empty() {
        return Err(Error::InvalidData("empty forcing series".into()));
    }
    let mut theta_top = Vec::with_capacity(forcing.len() + 1);
    let mut clip_count = 0usize;
    let mut state = HybridState { pbm: *initial, forcing: forcing[0] };
    theta_top.push(state.pbm.theta_top);
    for t in 0..forcing.len() {
        let next_forcing = forcing.get(t + 1).unwrap_or(&forcing[t]);
        let (next, info) = hybrid_step(&state, next_forcing, model)?;
        if info.clipped {
            clip_count += 1;
        }
        theta_top.push(next.pbm.theta_top);
        state = next;
    }
    Ok(Rollout { theta_top, clip_count })
}

/// Periodic spin-up passes used to initialize the unobserved substate before
/// every evaluation or calibration rollout. Annual windows contract to their
/// periodic fixed point within two passes.
pub const SPIN_UP_PASSES: usize = 2;

/// Spin up the unobserved substate by running the bucket model closed-loop
/// over the series' own forcing `passes` times (temporal periodic boundary),
/// starting from field capacity. Observations are never touched.
pub fn spin_up_state(forcing: &[Forcing], params: &PbmParams, passes: usize) -> Result<PbmState> {
    let mut state = PbmState::at_field_capacity(params);
    for _ in 0..passes.max(1) {
        state = *pbm_run(&state, forcing, params)?.states.last().unwrap();
    }
    Ok(state)
}

/// A window of site data: forcing and observations of θ_top (gaps allowed),
/// plus the global index of the window's first step for provenance.
#[derive(Debug, Clone, Copy)]
pub struct SegmentRef<'a> {
    pub forcing: &'a [Forcing],
    pub observations: &'a [Option<f64>],
    pub start_index: usize,
}

impl<'a> SegmentRef<'a> {
    pub fn validate(&self) -> Result<()> {
        if self.forcing.is_empty() {
            return Err(Error::InvalidData("empty segment".into()));
        }
        if self.forcing.len() != self.observations.len() {
            return Err(Error::DimensionMismatch {
                expected: self.forcing.len(),
                got: self.observations.len(),
                context: "observations per forcing step",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EquilibrationOptions {
    /// Convergence threshold on the substate change across a pass:
    /// max(|Δθ_lower|, |Δswe|/lower_depth).
    pub tol: f64,
    pub max_passes: usize,
}

impl Default for EquilibrationOptions {
    fn default() -> Self {
        Self { tol: 1e-6, max_passes: 10 }
    }
}

#[derive(Debug, Clone)]
pub struct EquilibratedSegment {
    /// One state per step boundary (length steps+1). θ_top carries the
    /// teacher-forced value actually used at each step.
    pub states: Vec<PbmState>,
    pub passes: usize,
    pub converged: bool,
    pub final_delta: f64,
}

/// One teacher-forced sweep. θ_top is reset to the observation wherever one
/// exists and evolves freely across gaps; the unobserved substate always
/// evolves freely from `start`.
fn teacher_forced_sweep(
    seg: &SegmentRef,
    params: &PbmParams,
    start: &PbmState,
) -> Vec<PbmState> {
    let n = seg.forcing.len();
    let mut states = Vec::with_capacity(n + 1);
    let clip = |v: f64| v.clamp(params.theta_residual, params.theta_saturation);
    let mut state = *start;
    state.theta_top = clip(seg.observations[0].unwrap_or(start.theta_top));
    states.push(state);
    for t in 0..n {
        let (next, _) = pbm_step(&state, &seg.forcing[t], params);
        state = next;
        if t + 1 < n {
            if let Some(obs) = seg.observations[t + 1] {
                state.theta_top = clip(obs);
            }
        }
        states.push(state);
    }
    states
}

/// Settle the unobserved substate against a window of observations by
/// sweeping teacher-forced passes with a temporal periodic boundary: the
/// substate at the end of a pass seeds the start of the next.
pub fn equilibrate_unobserved(
    seg: &SegmentRef,
    params: &PbmParams,
    opts: &EquilibrationOptions,
) -> Result<EquilibratedSegment> {
    seg.validate()?;
    params.validate()?;
    let mut start = PbmState::at_field_capacity(params);
    let mut states = Vec::new();
    let mut passes = 0;
    let mut converged = false;
    let mut final_delta = f64::INFINITY;
    while passes < opts.max_passes.max(1) {
        states = teacher_forced_sweep(seg, params, &start);
        passes += 1;
        let end = states.last().unwrap();
        let delta = (end.theta_lower - start.theta_lower)
            .abs()
            .max((end.swe_mm - start.swe_mm).abs() / params.lower_depth_mm);
        final_delta = delta;
        start = PbmState { theta_top: end.theta_top, ..*end };
        if delta < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(EquilibratedSegment { states, passes, converged, final_delta })
}

/// Where a training pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairProvenance {
    /// Global index of step t (the model input's step).
    pub timestep: usize,
}

/// One-step-ahead residual training set with bookkeeping.
#[derive(Debug, Clone)]
pub struct ResidualTrainingSet {
    pub data: Dataset,
    pub provenance: Vec<PairProvenance>,
    pub equilibration: Vec<EquilibrationSummary>,
}

#[derive(Debug, Clone, Copy)]
pub struct EquilibrationSummary {
    pub segment_start: usize,
    pub passes: usize,
    pub converged: bool,
    pub final_delta: f64,
}

impl ResidualTrainingSet {
    pub fn n(&self) -> usize {
        self.data.n()
    }
}

/// Drop training pairs whose one-step residual exceeds `max_abs`.
///
/// A residual of several hundredths of θ in one step is not drift the
/// corrector should smooth over: it is a discrete state-divergence event
/// (a threshold scheme releasing its whole pack at once). Left in, such
/// rows act as leverage points that drag the kernel toward cliff-fitting
/// and wreck the lengthscales for everything else. Returns the kept set
/// and the number of rows removed; refuses to remove every row.
pub fn trim_extreme_residuals(
    ts: &ResidualTrainingSet,
    max_abs: f64,
) -> Result<(ResidualTrainingSet, usize)> {
    if !(max_abs > 0.0) {
        return Err(Error::InvalidConfig("residual trim threshold must be positive".into()));
    }
    let n = ts.data.n();
    let inputs = ts.data.inputs();
    let targets = ts.data.targets();
    let keep: Vec<usize> = (0..n).filter(|&i| targets[i].abs() <= max_abs).collect();
    if keep.len() == n {
        return Ok((ts.clone(), 0));
    }
    if keep.is_empty() {
        return Err(Error::InvalidData(format!(
            "residual trim at {max_abs} would drop all {n} training pairs"
        )));
    }
    let mut rows = DMatrix::zeros(keep.len(), inputs.ncols());
    let mut ys = nalgebra::DVector::zeros(keep.len());
    let mut provenance = Vec::with_capacity(keep.len());
    for (r, &i) in keep.iter().enumerate() {
        for j in 0..inputs.ncols() {
            rows[(r, j)] = inputs[(i, j)];
        }
        ys[r] = targets[i];
        provenance.push(ts.provenance[i]);
    }
    let dropped = n - keep.len();
    Ok((
        ResidualTrainingSet {
            data: Dataset::new(rows, ys)?,
            provenance,
            equilibration: ts.equilibration.clone(),
        },
        dropped,
    ))
}

/// Build the residual training set over one or more segments.
///
/// For every step t with observations at both t and t+1 inside the same
/// segment, the input is v_t (equilibrated substate, forcing at t, observed
/// θ_top at t) and the target is y_{t+1} − f(v_t), where f is the bucket
/// model's one-step θ_top prediction. Steps around observation gaps simply
/// produce no pair; nothing is interpolated.
pub fn build_training_set(
    segments: &[SegmentRef],
    params: &PbmParams,
    opts: &EquilibrationOptions,
) -> Result<ResidualTrainingSet> {
    if segments.is_empty() {
        return Err(Error::InvalidData("no segments given".into()));
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    let mut provenance = Vec::new();
    let mut equilibration = Vec::new();

    for seg in segments {
        let eq = equilibrate_unobserved(seg, params, opts)?;
        equilibration.push(EquilibrationSummary {
            segment_start: seg.start_index,
            passes: eq.passes,
            converged: eq.converged,
            final_delta: eq.final_delta,
        });
        let n = seg.forcing.len();
        for t in 0..n.saturating_sub(1) {
            let (Some(y_t), Some(y_next)) = (seg.observations[t], seg.observations[t + 1]) else {
                continue;
            };
            let state = HybridState {
                pbm: PbmState { theta_top: y_t, ..eq.states[t] },
                forcing: seg.forcing[t],
            };
            let (pred, _) = pbm_step(&state.pbm, &state.forcing, params);
            rows.extend_from_slice(&state.features());
            targets.push(y_next - pred.theta_top);
            provenance.push(PairProvenance { timestep: seg.start_index + t });
        }
    }

    if targets.is_empty() {
        return Err(Error::InvalidData(
            "no adjacent observation pairs in any segment".into(),
        ));
    }
    let data = Dataset::new(
        DMatrix::from_row_slice(targets.len(), FEATURE_DIM, &rows),
        nalgebra::DVector::from_vec(targets),
    )?;
    Ok(ResidualTrainingSet { data, provenance, equilibration })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::fit_exact_raw;
    use crate::kernel::KernelHyperparams;
    use crate::synth::{generate_forcing, WeatherConfig};

    fn short_forcing(seed: u64, steps: usize) -> Vec<Forcing> {
        generate_forcing(seed, 1, &WeatherConfig { days_per_year: 40, ..WeatherConfig::default() })
            [..steps]
            .to_vec()
    }

    #[test]
    fn zero_corrector_reproduces_pbm_bitwise() {
        let params = PbmParams::default();
        let forcing = short_forcing(4, 500);
        let initial = PbmState::at_field_capacity(&params);
        let hybrid = rollout(&HybridModel::uncorrected(params.clone()), &initial, &forcing).unwrap();
        let plain = pbm_run(&initial, &forcing, &params).unwrap();
        assert_eq!(hybrid.clip_count, 0);
        for (h, p) in hybrid.theta_top.iter().zip(plain.theta_top()) {
            assert!(h.to_bits() == p.to_bits(), "hybrid {h} vs pbm {p}");
        }
    }

    #[test]
    fn equilibration_converges_and_reports() {
        // A full annual window: winter recharge drives the lower layer
        // through its drainage regime, so the periodic map contracts.
        let params = PbmParams::default();
        let cfg = WeatherConfig::default();
        let site =
            crate::synth::generate_synthetic_site(7, 1, &crate::synth::truth_params(), 0.0, &cfg)
                .unwrap();
        let seg = SegmentRef {
            forcing: &site.forcing,
            observations: &site.observations,
            start_index: 0,
        };
        let eq = equilibrate_unobserved(&seg, &params, &EquilibrationOptions::default()).unwrap();
        assert!(eq.converged, "delta {}", eq.final_delta);
        assert!(eq.passes <= 10);
        assert_eq!(eq.states.len(), site.forcing.len() + 1);

        // A single pass cannot meet an extreme tolerance; the flag says so.
        let tight = EquilibrationOptions { tol: 1e-15, max_passes: 1 };
        let eq1 = equilibrate_unobserved(&seg, &params, &tight).unwrap();
        assert!(!eq1.converged);
        assert_eq!(eq1.passes, 1);
    }

    #[test]
    fn training_pairs_skip_gaps() {
        let params = PbmParams::default();
        let forcing = short_forcing(2, 200);
        let mut obs: Vec<Option<f64>> = (0..200).map(|i| Some(0.25 + 1e-4 * i as f64)).collect();
        for i in 90..110 {
            obs[i] = None;
        }
        let seg = SegmentRef { forcing: &forcing, observations: &obs, start_index: 1000 };
        let ts = build_training_set(&[seg], &params, &EquilibrationOptions::default()).unwrap();
        // Pairs need observations at both t and t+1: 199 candidates minus 21.
        assert_eq!(ts.n(), 199 - 21);
        assert!(ts.provenance.iter().all(|p| {
            let t = p.timestep - 1000;
            !(89..110).contains(&t)
        }));
        assert_eq!(ts.equilibration.len(), 1);
    }

    #[test]
    fn training_target_is_one_step_residual() {
        let params = PbmParams::default();
        let forcing = vec![Forcing { precip_mm: 0.0, air_temp_c: 12.0, pet_mm: 0.1 }; 3];
        let obs = vec![Some(0.32), Some(0.30), Some(0.31)];
        let seg = SegmentRef { forcing: &forcing, observations: &obs, start_index: 0 };
        let ts = build_training_set(&[seg], &params, &EquilibrationOptions::default()).unwrap();
        assert_eq!(ts.n(), 2);

        let eq = equilibrate_unobserved(&seg, &params, &EquilibrationOptions::default()).unwrap();
        let state = PbmState { theta_top: 0.32, ..eq.states[0] };
        let (pred, _) = pbm_step(&state, &forcing[0], &params);
        assert_eq!(ts.data.targets()[0], 0.30 - pred.theta_top);
        // Input carries the observed θ_top, not the model's.
        assert_eq!(ts.data.inputs()[(0, 5)], 0.32);
    }

    #[test]
    fn large_corrections_are_clipped_and_counted() {
        let params = PbmParams::default();
        let forcing = vec![Forcing { precip_mm: 0.0, air_temp_c: 15.0, pet_mm: 0.0 }; 20];
        let initial = PbmState::at_field_capacity(&params);
        // A corrector that insists on +5 everywhere near the trajectory.
        let v0 = HybridState { pbm: initial, forcing: forcing[0] }.features();
        let data = Dataset::from_rows(&[v0.to_vec()], &[5.0]).unwrap();
        let hyper = KernelHyperparams::isotropic(25.0, 10.0, FEATURE_DIM, 1e-6).unwrap();
        let gp = fit_exact_raw(&data, &hyper).unwrap();
        let model = HybridModel { params: params.clone(), corrector: Corrector::Exact(gp) };
        let out = rollout(&model, &initial, &forcing).unwrap();
        assert!(out.clip_count > 0);
        for th in &out.theta_top {
            assert!(*th >= params.theta_residual && *th <= params.theta_saturation);
        }
    }
}
