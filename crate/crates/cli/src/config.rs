//! TOML experiment configuration.
//!
//! The schema is closed: unknown keys anywhere are a parse error, so typos
//! fail before any compute starts. Every run-affecting knob lives here; the
//! few CLI flags only override fields of this struct.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use hpbm_core::calibration::{CalParam, CalibrationSpec, SceConfig};
use hpbm_core::opt::OptConfig;
use hpbm_core::seeds::derive_seed;
use hpbm_core::spgp::SpgpOptions;
use hpbm_core::synth::STEPS_PER_DAY;
use hpbm_core::training::{LooConfig, SelectionPolicy};

/// Calibratable parameters in canonical order, used to normalize the bounds
/// table into a reproducible spec.
const CAL_PARAMS: [CalParam; 5] = [
    CalParam::InfiltrationRateMax,
    CalParam::PercolationCoeff,
    CalParam::EtPartition,
    CalParam::MeltThreshold,
    CalParam::DegreeDayFactor,
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; all per-site and per-fold randomness derives from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Length of the experiment year; 365 for realistic sites, smaller for
    /// quick tests. Steps per year is this times 48.
    #[serde(default = "default_days_per_year")]
    pub days_per_year: usize,
    #[serde(default)]
    pub sites: Vec<SiteEntry>,
    #[serde(default)]
    pub synth: Option<SynthSection>,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub bma: BmaSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteEntry {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub years: usize,
    #[serde(default = "default_noise")]
    pub obs_noise_sd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    #[serde(default = "default_max_evals")]
    pub max_evals: usize,
    #[serde(default = "default_complexes")]
    pub n_complexes: usize,
    /// Bounds overrides keyed by parameter name; parameters not listed keep
    /// their default search interval.
    #[serde(default)]
    pub bounds: BTreeMap<String, [f64; 2]>,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            max_evals: default_max_evals(),
            n_complexes: default_complexes(),
            bounds: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "default_counts")]
    pub counts: Vec<usize>,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub selection: SelectionArg,
    #[serde(default)]
    pub ablate_corrector: bool,
    /// Iteration cap for each GP hyperparameter fit.
    #[serde(default = "default_gp_iters")]
    pub gp_max_iters: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            counts: default_counts(),
            restarts: default_restarts(),
            selection: SelectionArg::default(),
            ablate_corrector: false,
            gp_max_iters: default_gp_iters(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BmaSection {
    #[serde(default)]
    pub enabled: bool,
    /// Weighting temperature τ; omitted means the data-driven default.
    #[serde(default)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SelectionArg {
    #[default]
    #[value(name = "in_sample")]
    InSample,
    Oracle,
    Both,
}

impl SelectionArg {
    pub fn policy(self) -> SelectionPolicy {
        match self {
            SelectionArg::InSample => SelectionPolicy::InSample,
            SelectionArg::Oracle => SelectionPolicy::Oracle,
            SelectionArg::Both => SelectionPolicy::Both,
        }
    }
}

fn default_days_per_year() -> usize {
    365
}
fn default_noise() -> f64 {
    0.005
}
fn default_max_evals() -> usize {
    10_000
}
fn default_complexes() -> usize {
    4
}
fn default_counts() -> Vec<usize> {
    vec![8, 16, 32, 64]
}
fn default_restarts() -> usize {
    10
}
fn default_gp_iters() -> usize {
    500
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// The config as it will actually run, for echoing into the run
    /// directory.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing effective config")
    }

    pub fn steps_per_year(&self) -> usize {
        self.days_per_year * STEPS_PER_DAY
    }

    /// Structural validation; numeric contracts are re-checked by the core
    /// library when the run starts.
    pub fn validate(&self) -> Result<()> {
        if self.out_dir.as_os_str().is_empty() {
            bail!("out_dir must not be empty");
        }
        if self.days_per_year == 0 {
            bail!("days_per_year must be positive");
        }
        if self.sites.is_empty() {
            bail!("at least one [[sites]] entry is required");
        }
        let mut seen = std::collections::BTreeSet::new();
        for site in &self.sites {
            if site.name.is_empty()
                || !site
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                bail!(
                    "site name `{}` must be non-empty and use only [A-Za-z0-9_-] \
                     (it becomes part of output file names)",
                    site.name
                );
            }
            if !seen.insert(&site.name) {
                bail!("duplicate site name `{}`", site.name);
            }
        }
        if let Some(synth) = &self.synth {
            if synth.years < 2 {
                bail!("synth.years must be at least 2 (cross-validation needs 2 folds)");
            }
            if !synth.obs_noise_sd.is_finite() || synth.obs_noise_sd < 0.0 {
                bail!("synth.obs_noise_sd must be finite and nonnegative");
            }
        }
        if self.calibration.max_evals == 0 {
            bail!("calibration.max_evals must be positive");
        }
        if self.calibration.n_complexes < 2 {
            bail!("calibration.n_complexes must be at least 2");
        }
        for (name, [lo, hi]) in &self.calibration.bounds {
            if !CAL_PARAMS.iter().any(|p| p.name() == name) {
                let valid: Vec<&str> = CAL_PARAMS.iter().map(|p| p.name()).collect();
                bail!("unknown calibration parameter `{name}`; valid names: {valid:?}");
            }
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                bail!("calibration bounds for `{name}` must be finite with lo < hi");
            }
        }
        if self.training.counts.is_empty() || self.training.counts.iter().any(|&c| c == 0) {
            bail!("training.counts must be non-empty positive integers");
        }
        if self.training.restarts == 0 {
            bail!("training.restarts must be positive");
        }
        if self.training.gp_max_iters == 0 {
            bail!("training.gp_max_iters must be positive");
        }
        if let Some(t) = self.bma.temperature {
            if !(t.is_finite() && t > 0.0) {
                bail!("bma.temperature must be finite and positive");
            }
        }
        Ok(())
    }

    /// The calibration spec with bounds overrides applied in canonical
    /// parameter order.
    pub fn calibration_spec(&self) -> CalibrationSpec {
        let defaults = CalibrationSpec::default();
        let mut entries = Vec::new();
        for param in CAL_PARAMS {
            if let Some([lo, hi]) = self.calibration.bounds.get(param.name()) {
                entries.push((param, *lo, *hi));
            } else if let Some(e) = defaults.entries.iter().find(|(p, _, _)| *p == param) {
                entries.push(*e);
            }
        }
        CalibrationSpec { entries }
    }

    pub fn sce_config(&self) -> SceConfig {
        SceConfig {
            n_complexes: self.calibration.n_complexes,
            max_evals: self.calibration.max_evals,
            ..SceConfig::default()
        }
    }

    /// Cross-validation settings for the site at `site_index`. The seed is
    /// namespaced per site so sites are independent but reproducible.
    pub fn loo_config(&self, site_index: usize) -> LooConfig {
        LooConfig {
            counts: self.training.counts.clone(),
            restarts: self.training.restarts,
            seed: derive_seed(self.seed, &[2, site_index as u64]),
            selection: self.training.selection.policy(),
            calibration: self.calibration_spec(),
            sce: self.sce_config(),
            spgp: SpgpOptions {
                opt: OptConfig {
                    max_iters: self.training.gp_max_iters,
                    ..OptConfig::default()
                },
                ..SpgpOptions::default()
            },
            ablate_corrector: self.training.ablate_corrector,
            bma: self.bma.enabled,
            bma_temperature: self.bma.temperature,
            ..LooConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seed = 7
        out_dir = "runs/x"
        [[sites]]
        name = "alpine"
        path = "sites/alpine.csv"
    "#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.days_per_year, 365);
        assert_eq!(cfg.training.counts, vec![8, 16, 32, 64]);
        assert_eq!(cfg.training.restarts, 10);
        assert_eq!(cfg.training.selection, SelectionArg::InSample);
        assert!(!cfg.bma.enabled);
        assert_eq!(cfg.steps_per_year(), 17520);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\nextra_knob = 3\n");
        assert!(toml::from_str::<ExperimentConfig>(&text).is_err());

        let nested = MINIMAL.replace(
            "path = \"sites/alpine.csv\"",
            "path = \"sites/alpine.csv\"\ncolor = \"red\"",
        );
        assert!(toml::from_str::<ExperimentConfig>(&nested).is_err());
    }

    #[test]
    fn bounds_override_and_reject_unknown_names() {
        let text = format!(
            "{MINIMAL}\n[calibration]\nbounds = {{ melt_threshold_c = [-1.0, 2.0] }}\n"
        );
        let cfg: ExperimentConfig = toml::from_str(&text).unwrap();
        cfg.validate().unwrap();
        let spec = cfg.calibration_spec();
        let entry = spec
            .entries
            .iter()
            .find(|(p, _, _)| *p == CalParam::MeltThreshold)
            .unwrap();
        assert_eq!((entry.1, entry.2), (-1.0, 2.0));

        let bad = format!("{MINIMAL}\n[calibration]\nbounds = {{ porosity = [0.0, 1.0] }}\n");
        let cfg: ExperimentConfig = toml::from_str(&bad).unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("porosity"), "{err}");
    }

    #[test]
    fn selection_parses_all_variants() {
        for (text, arg) in [
            ("in_sample", SelectionArg::InSample),
            ("oracle", SelectionArg::Oracle),
            ("both", SelectionArg::Both),
        ] {
            let cfg: ExperimentConfig = toml::from_str(&format!(
                "{MINIMAL}\n[training]\nselection = \"{text}\"\n"
            ))
            .unwrap();
            assert_eq!(cfg.training.selection, arg);
        }
    }

    #[test]
    fn effective_config_round_trips() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        let echoed = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&echoed).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.training.counts, cfg.training.counts);
    }

    #[test]
    fn site_names_are_filename_safe() {
        let bad = MINIMAL.replace("alpine", "al/pine");
        let cfg: ExperimentConfig = toml::from_str(&bad).unwrap();
        assert!(cfg.validate().is_err());
    }
}
