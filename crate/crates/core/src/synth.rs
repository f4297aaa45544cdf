//! Synthetic forcing and twin-experiment sites.
//!
//! A site is generated by driving the bucket model with stochastic but
//! seasonally structured weather and observing its top-layer moisture with
//! added noise. Since the generating ("truth") model is known, experiments
//! can score predictions against the noise-free trajectory.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::error::Result;
use crate::pbm::{pbm_run, Forcing, PbmParams, PbmState};
use crate::seeds::derive_seed;

/// Half-hourly resolution throughout.
pub const STEPS_PER_DAY: usize = 48;

/// Stochastic weather parameters. Defaults describe a mid-latitude site with
/// snow-covered winters and a pronounced seasonal cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherConfig {
    /// Days per synthetic year; the seasonal cycle completes in this window.
    pub days_per_year: usize,
    /// Annual-mean air temperature [°C].
    pub t_mean_c: f64,
    /// Seasonal half-amplitude [°C]; winters reach mean − amplitude.
    pub t_seasonal_amp_c: f64,
    /// Diurnal half-amplitude [°C].
    pub t_diurnal_amp_c: f64,
    /// Standard deviation of the synoptic temperature anomaly [°C].
    pub t_noise_sd_c: f64,
    /// e-folding time of the anomaly [days].
    pub t_noise_corr_days: f64,
    /// Per-step probability of a dry→wet transition.
    pub p_dry_to_wet: f64,
    /// Per-step probability of staying wet.
    pub p_wet_to_wet: f64,
    /// Mean precipitation per wet step [mm].
    pub wet_intensity_mm: f64,
    /// PET per degree of above-freezing air temperature at full daylight
    /// [mm/(°C·step)].
    pub pet_coeff: f64,
}

impl Default for WeatherConfig {
    fn default() -> Self {
        Self {
            days_per_year: 365,
            t_mean_c: 6.0,
            t_seasonal_amp_c: 14.0,
            t_diurnal_amp_c: 4.0,
            t_noise_sd_c: 3.0,
            t_noise_corr_days: 2.0,
            p_dry_to_wet: 0.006,
            p_wet_to_wet: 0.92,
            wet_intensity_mm: 0.5,
            pet_coeff: 0.012,
        }
    }
}

impl WeatherConfig {
    pub fn steps_per_year(&self) -> usize {
        self.days_per_year * STEPS_PER_DAY
    }
}

/// Generate `years` years of half-hourly forcing.
pub fn generate_forcing(seed: u64, years: usize, cfg: &WeatherConfig) -> Vec<Forcing> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let steps = years * cfg.steps_per_year();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let intensity = Exp::new(1.0 / cfg.wet_intensity_mm).unwrap();

    let rho = (-1.0 / (cfg.t_noise_corr_days * STEPS_PER_DAY as f64)).exp();
    let innovation = cfg.t_noise_sd_c * (1.0 - rho * rho).sqrt();
    let mut anomaly = cfg.t_noise_sd_c * normal.sample(&mut rng);
    let mut wet = false;

    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        let day = k as f64 / STEPS_PER_DAY as f64;
        let hour = (k % STEPS_PER_DAY) as f64 * 0.5;

        // Coldest around day 15 of each year, warmest half a year later.
        let seasonal = -cfg.t_seasonal_amp_c
            * (2.0 * std::f64::consts::PI * (day - 15.0) / cfg.days_per_year as f64).cos();
        let diurnal = -cfg.t_diurnal_amp_c * (2.0 * std::f64::consts::PI * hour / 24.0).cos();
        anomaly = rho * anomaly + innovation * normal.sample(&mut rng);
        let air_temp_c = cfg.t_mean_c + seasonal + diurnal + anomaly;

        wet = if wet {
            rng.random_bool(cfg.p_wet_to_wet)
        } else {
            rng.random_bool(cfg.p_dry_to_wet)
        };
        let precip_mm = if wet { intensity.sample(&mut rng) } else { 0.0 };

        // Daylight window 06:00..18:00, sinusoidal.
        let daylight = (std::f64::consts::PI * (hour - 6.0) / 12.0).sin().max(0.0);
        let pet_mm = cfg.pet_coeff * air_temp_c.max(0.0) * daylight;

        out.push(Forcing { precip_mm, air_temp_c, pet_mm });
    }
    out
}

/// A generated site with its hidden truth.
#[derive(Debug, Clone)]
pub struct SyntheticSite {
    pub forcing: Vec<Forcing>,
    /// Noisy top-layer moisture, one value per step, clipped to physical range.
    pub observations: Vec<Option<f64>>,
    /// Noise-free top-layer moisture the observations were drawn from.
    pub truth_theta: Vec<f64>,
    /// Truth state at the start of the record (after spin-up).
    pub initial_state: PbmState,
    pub truth_params: PbmParams,
    pub weather: WeatherConfig,
}

/// Generate a twin-experiment site: weather, a spun-up truth run, and noisy
/// observations of θ_top. `obs_noise_sd = 0` yields observations exactly
/// equal to the truth trajectory.
pub fn generate_synthetic_site(
    seed: u64,
    years: usize,
    truth_params: &PbmParams,
    obs_noise_sd: f64,
    weather: &WeatherConfig,
) -> Result<SyntheticSite> {
    truth_params.validate()?;
    let forcing = generate_forcing(derive_seed(seed, &[0]), years, weather);
    let spy = weather.steps_per_year();

    // Spin-up: one pass over the first year's forcing, treated as periodic,
    // so the record does not start with an initialization transient.
    let warm = pbm_run(
        &PbmState::at_field_capacity(truth_params),
        &forcing[..spy.min(forcing.len())],
        truth_params,
    )?;
    let initial_state = *warm.states.last().unwrap();

    let run = pbm_run(&initial_state, &forcing, truth_params)?;
    let truth_theta: Vec<f64> = run.states[..forcing.len()].iter().map(|s| s.theta_top).collect();

    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, &[1]));
    let observations: Vec<Option<f64>> = if obs_noise_sd > 0.0 {
        let noise = Normal::new(0.0, obs_noise_sd).unwrap();
        truth_theta
            .iter()
            .map(|t| {
                Some(
                    (t + noise.sample(&mut rng))
                        .clamp(truth_params.theta_residual, truth_params.theta_saturation),
                )
            })
            .collect()
    } else {
        truth_theta.iter().map(|t| Some(*t)).collect()
    };

    Ok(SyntheticSite {
        forcing,
        observations,
        truth_theta,
        initial_state,
        truth_params: truth_params.clone(),
        weather: weather.clone(),
    })
}

/// Truth-model parameters used by synthetic experiments: degree-day melt and
/// a wetter infiltration regime than the defaults of the study model.
pub fn truth_params() -> PbmParams {
    PbmParams {
        melt_mode: crate::pbm::MeltMode::DegreeDay,
        melt_threshold_c: 0.0,
        infiltration_rate_max_mm: 4.0,
        percolation_coeff: 0.04,
        et_partition: 0.6,
        ..PbmParams::default()
    }
}
