//! Subcommand implementations.
//!
//! Every command computes its complete output in memory first and only then
//! touches the filesystem, so a failing run leaves no partial report behind.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::{DateTime, TimeZone, Utc};

use hpbm_core::calibration::calibrate_pbm;
use hpbm_core::data::{read_site_csv, write_site_data, SiteData};
use hpbm_core::hybrid::SegmentRef;
use hpbm_core::pbm::{MeltMode, PbmParams};
use hpbm_core::seeds::derive_seed;
use hpbm_core::synth::{generate_synthetic_site, truth_params, WeatherConfig};
use hpbm_core::training::{loo_cross_validate, ExperimentReport};

use crate::config::ExperimentConfig;
use crate::report::{render_table, SummaryRow};

/// All synthetic records start at the same instant; site content differs
/// only through seeds, never through wall-clock state.
fn synthetic_epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2001, 1, 1, 0, 0, 0).unwrap()
}

/// An output tree staged in memory.
#[derive(Debug, Default)]
pub struct RunOutput {
    files: Vec<(PathBuf, String)>,
}

impl RunOutput {
    fn push(&mut self, name: impl Into<PathBuf>, content: String) {
        self.files.push((name.into(), content));
    }

    pub fn file_names(&self) -> Vec<&Path> {
        self.files.iter().map(|(p, _)| p.as_path()).collect()
    }

    /// Write every staged file under `dir`, creating it if needed.
    pub fn commit(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating run directory {}", dir.display()))?;
        for (name, content) in &self.files {
            let path = dir.join(name);
            fs::write(&path, content)
                .with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }
}

fn params_toml(params: &PbmParams) -> String {
    let melt_mode = match params.melt_mode {
        MeltMode::FlawedThreshold => "flawed_threshold",
        MeltMode::DegreeDay => "degree_day",
    };
    format!(
        "theta_saturation = {}\n\
         theta_residual = {}\n\
         theta_field_capacity = {}\n\
         top_depth_mm = {}\n\
         lower_depth_mm = {}\n\
         infiltration_rate_max_mm = {}\n\
         percolation_coeff = {}\n\
         et_partition = {}\n\
         melt_mode = \"{}\"\n\
         melt_threshold_c = {}\n\
         degree_day_factor = {}\n",
        params.theta_saturation,
        params.theta_residual,
        params.theta_field_capacity,
        params.top_depth_mm,
        params.lower_depth_mm,
        params.infiltration_rate_max_mm,
        params.percolation_coeff,
        params.et_partition,
        melt_mode,
        params.melt_threshold_c,
        params.degree_day_factor,
    )
}

/// Generate one CSV per configured site, plus a truth-parameter sidecar for
/// twin-experiment grading.
pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let Some(synth) = &cfg.synth else {
        bail!("config has no [synth] section");
    };
    let weather = WeatherConfig { days_per_year: cfg.days_per_year, ..WeatherConfig::default() };
    let truth = truth_params();

    // Generate everything before writing anything.
    let mut outputs: Vec<(PathBuf, String, String)> = Vec::new();
    for (i, entry) in cfg.sites.iter().enumerate() {
        let site_seed = derive_seed(cfg.seed, &[1, i as u64]);
        let site = generate_synthetic_site(site_seed, synth.years, &truth, synth.obs_noise_sd, &weather)
            .with_context(|| format!("generating site `{}`", entry.name))?;
        let mut csv = Vec::new();
        write_site_data(&mut csv, synthetic_epoch(), &site.forcing, &site.observations)
            .with_context(|| format!("serializing site `{}`", entry.name))?;
        let sidecar = format!(
            "# generating model for site `{}` (twin-experiment grading)\n\
             seed = {site_seed}\nyears = {}\nobs_noise_sd = {}\n\n[truth_params]\n{}",
            entry.name,
            synth.years,
            synth.obs_noise_sd,
            params_toml(&truth),
        );
        outputs.push((entry.path.clone(), String::from_utf8(csv).unwrap(), sidecar));
    }

    for (path, csv, sidecar) in &outputs {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
        let sidecar_path = path.with_extension("truth.toml");
        fs::write(&sidecar_path, sidecar)
            .with_context(|| format!("writing {}", sidecar_path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

struct LoadedSite {
    name: String,
    data: SiteData,
}

fn load_sites(cfg: &ExperimentConfig) -> Result<Vec<LoadedSite>> {
    cfg.sites
        .iter()
        .map(|entry| {
            let data = read_site_csv(&entry.path)
                .with_context(|| format!("site `{}` ({})", entry.name, entry.path.display()))?;
            Ok(LoadedSite { name: entry.name.clone(), data })
        })
        .collect()
}

/// Calibrate the bucket model against each site's full record and write the
/// fitted parameters plus the search trace.
pub fn cmd_calibrate(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let sites = load_sites(cfg)?;
    let spec = cfg.calibration_spec();

    let mut out = RunOutput::default();
    out.push("config.toml", cfg.to_toml()?);
    let mut lines = Vec::new();
    for (i, site) in sites.iter().enumerate() {
        let seg = SegmentRef {
            forcing: &site.data.forcing,
            observations: &site.data.observations,
            start_index: 0,
        };
        let sce = hpbm_core::calibration::SceConfig {
            seed: derive_seed(cfg.seed, &[3, i as u64]),
            ..cfg.sce_config()
        };
        let cal = calibrate_pbm(&PbmParams::default(), &spec, &[seg], &sce)
            .with_context(|| format!("calibrating site `{}`", site.name))?;

        let mut trace = String::from("shuffle,evaluations,best\n");
        for p in &cal.outcome.trace {
            writeln!(trace, "{},{},{}", p.shuffle, p.evaluations, p.best).unwrap();
        }
        out.push(format!("calibration_{}.csv", site.name), trace);
        out.push(
            format!("calibrated_{}.toml", site.name),
            format!(
                "# site `{}`: closed-loop RMSE {} after {} evaluations (converged: {})\n{}",
                site.name,
                cal.rmse,
                cal.outcome.evaluations,
                cal.outcome.converged,
                params_toml(&cal.params),
            ),
        );
        lines.push(format!(
            "{}: rmse {:.5} after {} evaluations{}",
            site.name,
            cal.rmse,
            cal.outcome.evaluations,
            if cal.outcome.converged { "" } else { " (budget exhausted)" },
        ));
    }

    out.commit(&cfg.out_dir)?;
    for line in lines {
        println!("{line}");
    }
    Ok(())
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Stage every report file for one site's experiment.
fn stage_site_report(out: &mut RunOutput, site: &LoadedSite, report: &ExperimentReport) {
    let spy = report.steps_per_year;

    for fold in &report.folds {
        let year = fold.held_out_year;

        let mut series = String::from("timestamp,theta_obs,theta_pbm,theta_hpbm,precip_mm\n");
        for t in 0..spy {
            let global = year * spy + t;
            let ts = site.data.timestamp(global);
            let obs = site.data.observations[global]
                .map(|v| v.to_string())
                .unwrap_or_default();
            writeln!(
                series,
                "{},{},{},{},{}",
                ts.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                obs,
                fold.theta_pbm[t],
                fold.theta_hpbm[t],
                site.data.forcing[global].precip_mm,
            )
            .unwrap();
        }
        out.push(format!("series_{}_{}.csv", site.name, year), series);

        let mut trace = String::from("shuffle,evaluations,best\n");
        for p in &fold.calibration_trace {
            writeln!(trace, "{},{},{}", p.shuffle, p.evaluations, p.best).unwrap();
        }
        out.push(format!("calibration_{}_year{}.csv", site.name, year), trace);
    }

    let has_weights = report.folds.iter().any(|f| f.bma_weights.is_some());
    if has_weights {
        let mut weights = String::from("held_out_year,m,restart,dynamical_rmse,weight\n");
        for fold in &report.folds {
            let Some(w) = &fold.bma_weights else { continue };
            for (diag, weight) in fold.candidates.iter().zip(w) {
                let rmse = diag.in_sample_rmse.or(diag.oracle_rmse);
                writeln!(
                    weights,
                    "{},{},{},{},{}",
                    fold.held_out_year,
                    diag.m,
                    diag.restart,
                    opt_cell(rmse),
                    weight,
                )
                .unwrap();
            }
        }
        out.push(format!("weights_{}.csv", site.name), weights);
    }
}

/// Run the full cross-validated experiment over every configured site.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let sites = load_sites(cfg)?;
    let spy = cfg.steps_per_year();

    let mut reports = Vec::new();
    for (i, site) in sites.iter().enumerate() {
        let series = site
            .data
            .clone()
            .into_series(&site.name, spy)
            .with_context(|| format!("site `{}`", site.name))?;
        let loo = cfg.loo_config(i);
        let report = loo_cross_validate(&series, &loo)
            .with_context(|| format!("running site `{}`", site.name))?;
        reports.push(report);
    }

    let mut out = RunOutput::default();
    out.push("config.toml", cfg.to_toml()?);

    let mut fold_csv = String::from(
        "site,held_out_year,calibration_rmse,training_pairs,trimmed_pairs,\
         equilibration_converged,pbm_rmse,hpbm_in_sample_rmse,hpbm_oracle_rmse,bma_rmse,\
         selected_m,selected_restart\n",
    );
    let mut summary_csv = String::from(
        "site,years,pbm_mean_rmse,hpbm_in_sample_mean_rmse,hpbm_oracle_mean_rmse,bma_mean_rmse\n",
    );
    let mut rows = Vec::new();
    for (site, report) in sites.iter().zip(&reports) {
        for fold in &report.folds {
            let selected = fold.selected_in_sample.or(fold.selected_oracle);
            writeln!(
                fold_csv,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                report.site,
                fold.held_out_year,
                fold.calibration_rmse,
                fold.training_pairs,
                fold.trimmed_pairs,
                fold.equilibration_converged,
                fold.pbm_rmse,
                opt_cell(fold.hpbm_in_sample_rmse),
                opt_cell(fold.hpbm_oracle_rmse),
                opt_cell(fold.bma_rmse),
                selected.map(|(m, _)| m.to_string()).unwrap_or_default(),
                selected.map(|(_, r)| r.to_string()).unwrap_or_default(),
            )
            .unwrap();
        }
        writeln!(
            summary_csv,
            "{},{},{},{},{},{}",
            report.site,
            report.years(),
            report.pbm_mean_rmse,
            opt_cell(report.hpbm_in_sample_mean_rmse),
            opt_cell(report.hpbm_oracle_mean_rmse),
            opt_cell(report.bma_mean_rmse),
        )
        .unwrap();
        rows.push(SummaryRow::from_report(report));
        stage_site_report(&mut out, site, report);
    }
    out.push("report.csv", fold_csv);
    out.push("summary.csv", summary_csv);

    out.commit(&cfg.out_dir)?;
    print!("{}", render_table(&rows));
    println!("run written to {}", cfg.out_dir.display());
    Ok(())
}
