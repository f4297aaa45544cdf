//! Two-layer bucket model of soil moisture with a snow store.
//!
//! All water is accounted in millimeters per half-hourly step. Fluxes are
//! applied in a fixed order: snow partition, melt, infiltration (excess to
//! runoff), evapotranspiration, percolation to the lower layer, drainage.
//! Within a step every flux is capped so stores never go negative and
//! moisture stays inside [θ_residual, θ_saturation].

use crate::error::{Error, Result};

/// Atmospheric drivers for one half-hourly step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Forcing {
    /// Precipitation over the step [mm].
    pub precip_mm: f64,
    /// Near-surface air temperature [°C].
    pub air_temp_c: f64,
    /// Potential evapotranspiration demand over the step [mm].
    pub pet_mm: f64,
}

impl Forcing {
    pub fn validate(&self) -> Result<()> {
        let ok = self.precip_mm.is_finite()
            && self.precip_mm >= 0.0
            && self.air_temp_c.is_finite()
            && self.pet_mm.is_finite()
            && self.pet_mm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidData(format!("invalid forcing {self:?}")))
        }
    }
}

/// How snowmelt is produced from the snow store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeltMode {
    /// The entire snowpack melts in one step as soon as air temperature
    /// exceeds the threshold. Cheap, and structurally wrong: it produces
    /// spurious moisture spikes wherever winter air briefly warms.
    FlawedThreshold,
    /// Melt proportional to the excess of air temperature over the
    /// threshold, capped by the available snowpack.
    DegreeDay,
}

/// Soil column and flux parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PbmParams {
    /// Porosity: volumetric moisture ceiling [m³/m³].
    pub theta_saturation: f64,
    /// Unextractable moisture floor [m³/m³].
    pub theta_residual: f64,
    /// Moisture level above which water drains freely [m³/m³].
    pub theta_field_capacity: f64,
    /// Thickness of the observed top layer [mm].
    pub top_depth_mm: f64,
    /// Thickness of the lower storage layer [mm].
    pub lower_depth_mm: f64,
    /// Infiltration capacity per step [mm]; the excess runs off.
    pub infiltration_rate_max_mm: f64,
    /// Fraction of the moisture excess over field capacity that percolates
    /// (top layer) or drains (lower layer) per step [1/step].
    pub percolation_coeff: f64,
    /// Fraction of PET demand taken from the top layer; the rest is taken
    /// from the lower layer.
    pub et_partition: f64,
    pub melt_mode: MeltMode,
    /// Air temperature above which snow melts [°C].
    pub melt_threshold_c: f64,
    /// Melt per degree above threshold per step [mm/(°C·step)].
    /// Only used by `DegreeDay`.
    pub degree_day_factor: f64,
}

impl Default for PbmParams {
    fn default() -> Self {
        Self {
            theta_saturation: 0.45,
            theta_residual: 0.05,
            theta_field_capacity: 0.30,
            top_depth_mm: 50.0,
            lower_depth_mm: 950.0,
            infiltration_rate_max_mm: 2.5,
            percolation_coeff: 0.03,
            et_partition: 0.5,
            melt_mode: MeltMode::FlawedThreshold,
            melt_threshold_c: 1.0,
            degree_day_factor: 0.08,
        }
    }
}

impl PbmParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.theta_residual >= 0.0
            && self.theta_residual < self.theta_field_capacity
            && self.theta_field_capacity < self.theta_saturation
            && self.theta_saturation <= 1.0)
        {
            return fail(format!(
                "need 0 ≤ θ_residual < θ_field_capacity < θ_saturation ≤ 1, got {} / {} / {}",
                self.theta_residual, self.theta_field_capacity, self.theta_saturation
            ));
        }
        for (v, name) in [
            (self.top_depth_mm, "top_depth_mm"),
            (self.lower_depth_mm, "lower_depth_mm"),
            (self.infiltration_rate_max_mm, "infiltration_rate_max_mm"),
            (self.degree_day_factor, "degree_day_factor"),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.percolation_coeff.is_finite() && (0.0..=1.0).contains(&self.percolation_coeff)) {
            return fail(format!(
                "percolation_coeff must lie in [0,1], got {}",
                self.percolation_coeff
            ));
        }
        if !((0.0..=1.0).contains(&self.et_partition)) {
            return fail(format!("et_partition must lie in [0,1], got {}", self.et_partition));
        }
        if !self.melt_threshold_c.is_finite() {
            return fail(format!("melt_threshold_c must be finite, got {}", self.melt_threshold_c));
        }
        Ok(())
    }
}

/// Model state: volumetric moisture in both layers plus snow water
/// equivalent. Moisture lives in [θ_residual, θ_saturation], swe ≥ 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PbmState {
    pub theta_top: f64,
    pub theta_lower: f64,
    pub swe_mm: f64,
}

impl PbmState {
    /// A mid-range starting state: both layers at field capacity, no snow.
    pub fn at_field_capacity(params: &PbmParams) -> Self {
        Self {
            theta_top: params.theta_field_capacity,
            theta_lower: params.theta_field_capacity,
            swe_mm: 0.0,
        }
    }

    pub fn validate(&self, params: &PbmParams) -> Result<()> {
        let in_range = |v: f64| v >= params.theta_residual && v <= params.theta_saturation;
        if in_range(self.theta_top) && in_range(self.theta_lower) && self.swe_mm >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidData(format!("state out of bounds: {self:?}")))
        }
    }
}

/// Per-step water fluxes [mm], for balance checking and diagnostics.
#[derive(Debug, Clone, Copy, Default)]
pub struct Fluxes {
    pub rain_mm: f64,
    pub snowfall_mm: f64,
    pub melt_mm: f64,
    pub infiltration_mm: f64,
    pub runoff_mm: f64,
    pub et_mm: f64,
    pub percolation_mm: f64,
    pub drainage_mm: f64,
}

/// Linear ET throttle: full demand at field capacity, nothing at the
/// residual floor.
#[inline]
fn et_throttle(theta: f64, params: &PbmParams) -> f64 {
    ((theta - params.theta_residual) / (params.theta_field_capacity - params.theta_residual))
        .clamp(0.0, 1.0)
}

/// Advance the column one step. Pure: same inputs, same outputs.
pub fn pbm_step(state: &PbmState, forcing: &Forcing, params: &PbmParams) -> (PbmState, Fluxes) {
    let mut w_top = state.theta_top * params.top_depth_mm;
    let mut w_low = state.theta_lower * params.lower_depth_mm;
    let mut swe = state.swe_mm;

    // Snow partition: sub-freezing precipitation accumulates as snow.
    let (rain, snowfall) = if forcing.air_temp_c < 0.0 {
        (0.0, forcing.precip_mm)
    } else {
        (forcing.precip_mm, 0.0)
    };
    swe += snowfall;

    let melt = match params.melt_mode {
        MeltMode::FlawedThreshold => {
            if forcing.air_temp_c > params.melt_threshold_c {
                swe
            } else {
                0.0
            }
        }
        MeltMode::DegreeDay => {
            let potential =
                params.degree_day_factor * (forcing.air_temp_c - params.melt_threshold_c).max(0.0);
            potential.min(swe)
        }
    };
    swe -= melt;

    // Infiltration up to capacity and available pore space; rest runs off.
    let water_in = rain + melt;
    let space_top = params.theta_saturation * params.top_depth_mm - w_top;
    let infiltration = water_in.min(params.infiltration_rate_max_mm).min(space_top);
    let runoff = water_in - infiltration;
    w_top += infiltration;

    // ET split between layers, throttled by dryness, capped at extractable water.
    let et_top = (params.et_partition * forcing.pet_mm * et_throttle(w_top / params.top_depth_mm, params))
        .min(w_top - params.theta_residual * params.top_depth_mm)
        .max(0.0);
    w_top -= et_top;
    let et_low = ((1.0 - params.et_partition)
        * forcing.pet_mm
        * et_throttle(w_low / params.lower_depth_mm, params))
    .min(w_low - params.theta_residual * params.lower_depth_mm)
    .max(0.0);
    w_low -= et_low;

    // Percolation: a fraction of the top-layer excess over field capacity,
    // limited by pore space below.
    let excess_top = (w_top - params.theta_field_capacity * params.top_depth_mm).max(0.0);
    let space_low = params.theta_saturation * params.lower_depth_mm - w_low;
    let percolation = (params.percolation_coeff * excess_top).min(excess_top).min(space_low);
    w_top -= percolation;
    w_low += percolation;

    // Drainage out of the column, same law on the lower layer.
    let excess_low = (w_low - params.theta_field_capacity * params.lower_depth_mm).max(0.0);
    let drainage = (params.percolation_coeff * excess_low).min(excess_low);
    w_low -= drainage;

    let next = PbmState {
        theta_top: w_top / params.top_depth_mm,
        theta_lower: w_low / params.lower_depth_mm,
        swe_mm: swe,
    };
    let fluxes = Fluxes {
        rain_mm: rain,
        snowfall_mm: snowfall,
        melt_mm: melt,
        infiltration_mm: infiltration,
        runoff_mm: runoff,
        et_mm: et_top + et_low,
        percolation_mm: percolation,
        drainage_mm: drainage,
    };
    (next, fluxes)
}

/// Result of a closed-loop run: one state per step boundary (length steps+1)
/// and accumulated fluxes.
#[derive(Debug, Clone)]
pub struct PbmRun {
    pub states: Vec<PbmState>,
    pub totals: Fluxes,
}

impl PbmRun {
    pub fn theta_top(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.theta_top).collect()
    }

    /// Water stored in the column at state `i` [mm].
    pub fn storage_mm(&self, i: usize, params: &PbmParams) -> f64 {
        let s = &self.states[i];
        s.theta_top * params.top_depth_mm + s.theta_lower * params.lower_depth_mm + s.swe_mm
    }
}

/// Run the model over a forcing series from `initial`.
pub fn pbm_run(initial: &PbmState, forcing: &[Forcing], params: &PbmParams) -> Result<PbmRun> {
    params.validate()?;
    initial.validate(params)?;
    let mut states = Vec::with_capacity(forcing.len() + 1);
    states.push(*initial);
    let mut totals = Fluxes::default();
    let mut state = *initial;
    for f in forcing {
        f.validate()?;
        let (next, fx) = pbm_step(&state, f, params);
        totals.rain_mm += fx.rain_mm;
        totals.snowfall_mm += fx.snowfall_mm;
        totals.melt_mm += fx.melt_mm;
        totals.infiltration_mm += fx.infiltration_mm;
        totals.runoff_mm += fx.runoff_mm;
        totals.et_mm += fx.et_mm;
        totals.percolation_mm += fx.percolation_mm;
        totals.drainage_mm += fx.drainage_mm;
        states.push(next);
        state = next;
    }
    Ok(PbmRun { states, totals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn step_balance(state: &PbmState, forcing: &Forcing, params: &PbmParams) -> f64 {
        let (next, fx) = pbm_step(state, forcing, params);
        let before = state.theta_top * params.top_depth_mm
            + state.theta_lower * params.lower_depth_mm
            + state.swe_mm;
        let after = next.theta_top * params.top_depth_mm
            + next.theta_lower * params.lower_depth_mm
            + next.swe_mm;
        (after - before) - (forcing.precip_mm - fx.runoff_mm - fx.et_mm - fx.drainage_mm)
    }

    #[test]
    fn freezing_rain_becomes_snow() {
        let params = PbmParams::default();
        let state = PbmState::at_field_capacity(&params);
        let cold = Forcing { precip_mm: 2.0, air_temp_c: -5.0, pet_mm: 0.0 };
        let (next, fx) = pbm_step(&state, &cold, &params);
        assert_eq!(fx.snowfall_mm, 2.0);
        assert_eq!(fx.rain_mm, 0.0);
        assert_eq!(next.swe_mm, 2.0);
        assert_eq!(next.theta_top, state.theta_top);
    }

    #[test]
    fn flawed_melt_dumps_everything_at_once() {
        let params = PbmParams { melt_threshold_c: 1.0, ..PbmParams::default() };
        let mut state = PbmState { swe_mm: 40.0, ..PbmState::at_field_capacity(&params) };
        let warm = Forcing { precip_mm: 0.0, air_temp_c: 1.5, pet_mm: 0.0 };
        let (next, fx) = pbm_step(&state, &warm, &params);
        assert_eq!(fx.melt_mm, 40.0);
        assert_eq!(next.swe_mm, 0.0);
        // The dump saturates infiltration capacity; the rest runs off.
        assert_eq!(fx.infiltration_mm, params.infiltration_rate_max_mm);
        assert_eq!(fx.runoff_mm, 40.0 - params.infiltration_rate_max_mm);

        // Degree-day melt releases gradually instead.
        let params_dd = PbmParams {
            melt_mode: MeltMode::DegreeDay,
            melt_threshold_c: 0.0,
            ..params
        };
        state.swe_mm = 40.0;
        let (next_dd, fx_dd) = pbm_step(&state, &warm, &params_dd);
        assert!(fx_dd.melt_mm < 1.0);
        assert!(next_dd.swe_mm > 39.0);
    }

    #[test]
    fn degree_day_melt_is_capped_by_snowpack() {
        let params = PbmParams {
            melt_mode: MeltMode::DegreeDay,
            melt_threshold_c: 0.0,
            degree_day_factor: 1.0,
            ..PbmParams::default()
        };
        let state = PbmState { swe_mm: 3.0, ..PbmState::at_field_capacity(&params) };
        let hot = Forcing { precip_mm: 0.0, air_temp_c: 20.0, pet_mm: 0.0 };
        let (next, fx) = pbm_step(&state, &hot, &params);
        assert_eq!(fx.melt_mm, 3.0);
        assert_eq!(next.swe_mm, 0.0);
    }

    #[test]
    fn saturated_column_sheds_rain_as_runoff() {
        let params = PbmParams::default();
        let state = PbmState {
            theta_top: params.theta_saturation,
            theta_lower: params.theta_saturation,
            swe_mm: 0.0,
        };
        let wet = Forcing { precip_mm: 10.0, air_temp_c: 10.0, pet_mm: 0.0 };
        let (next, fx) = pbm_step(&state, &wet, &params);
        assert_eq!(fx.infiltration_mm, 0.0);
        assert_eq!(fx.runoff_mm, 10.0);
        assert!(next.theta_top <= params.theta_saturation);
    }

    #[test]
    fn et_stops_at_residual() {
        let params = PbmParams::default();
        let state = PbmState {
            theta_top: params.theta_residual,
            theta_lower: params.theta_residual,
            swe_mm: 0.0,
        };
        let dry = Forcing { precip_mm: 0.0, air_temp_c: 25.0, pet_mm: 5.0 };
        let (next, fx) = pbm_step(&state, &dry, &params);
        assert_eq!(fx.et_mm, 0.0);
        assert_eq!(next.theta_top, params.theta_residual);
    }

    #[test]
    fn two_year_run_length_and_balance() {
        use rand::prelude::*;
        use rand_chacha::ChaCha12Rng;
        let params = PbmParams::default();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let forcing: Vec<Forcing> = (0..35040)
            .map(|_| Forcing {
                precip_mm: if rng.random_bool(0.1) { rng.random_range(0.0..4.0) } else { 0.0 },
                air_temp_c: rng.random_range(-15.0..30.0),
                pet_mm: rng.random_range(0.0..0.3),
            })
            .collect();
        let run = pbm_run(&PbmState::at_field_capacity(&params), &forcing, &params).unwrap();
        assert_eq!(run.states.len(), 35041);
        let precip: f64 = forcing.iter().map(|f| f.precip_mm).sum();
        let delta = run.storage_mm(35040, &params) - run.storage_mm(0, &params);
        let residual =
            delta - (precip - run.totals.runoff_mm - run.totals.et_mm - run.totals.drainage_mm);
        assert!(residual.abs() < 1e-8, "cumulative balance residual {residual}");
    }

    proptest! {
        #[test]
        fn step_conserves_water_and_bounds(
            theta_top in 0.05f64..0.45,
            theta_lower in 0.05f64..0.45,
            swe in 0.0f64..150.0,
            precip in 0.0f64..20.0,
            temp in -30.0f64..40.0,
            pet in 0.0f64..2.0,
            flawed in proptest::bool::ANY,
        ) {
            let params = PbmParams {
                melt_mode: if flawed { MeltMode::FlawedThreshold } else { MeltMode::DegreeDay },
                ..PbmParams::default()
            };
            let state = PbmState { theta_top, theta_lower, swe_mm: swe };
            let forcing = Forcing { precip_mm: precip, air_temp_c: temp, pet_mm: pet };
            let resid = step_balance(&state, &forcing, &params);
            prop_assert!(resid.abs() < 1e-10, "balance residual {resid}");
            let (next, _) = pbm_step(&state, &forcing, &params);
            prop_assert!(next.validate(&params).is_ok(), "state {next:?}");
        }

        #[test]
        fn extra_rain_never_dries_the_top_layer(
            theta_top in 0.05f64..0.45,
            precip in 0.0f64..10.0,
            extra in 0.0f64..10.0,
        ) {
            // Melt and ET disabled: wetting must be monotone in rainfall.
            let params = PbmParams::default();
            let state = PbmState { theta_top, theta_lower: 0.2, swe_mm: 0.0 };
            let base = Forcing { precip_mm: precip, air_temp_c: 10.0, pet_mm: 0.0 };
            let more = Forcing { precip_mm: precip + extra, ..base };
            let (s0, _) = pbm_step(&state, &base, &params);
            let (s1, _) = pbm_step(&state, &more, &params);
            prop_assert!(s1.theta_top >= s0.theta_top);
        }
    }
}
