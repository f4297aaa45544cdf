//! Summary table rendering and the `report` subcommand.
//!
//! `summary.csv` stores full-precision means; the improvement percentage is
//! recomputed here at render time so the printed table and the stored means
//! can never disagree.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

use hpbm_core::training::{percent_improvement, ExperimentReport};

#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub site: String,
    pub years: usize,
    pub pbm_mean_rmse: f64,
    pub hpbm_mean_rmse: f64,
}

impl SummaryRow {
    pub fn from_report(report: &ExperimentReport) -> Self {
        SummaryRow {
            site: report.site.clone(),
            years: report.years(),
            pbm_mean_rmse: report.pbm_mean_rmse,
            hpbm_mean_rmse: report.hpbm_mean_rmse(),
        }
    }

    pub fn improvement_pct(&self) -> i32 {
        percent_improvement(self.pbm_mean_rmse, self.hpbm_mean_rmse)
    }
}

/// Render the cross-site summary as an aligned text table.
pub fn render_table(rows: &[SummaryRow]) -> String {
    let headers = ["Site", "#Years", "PBM<RMSE>", "HPBM<RMSE>", "%Improvement"];
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.site.clone(),
                r.years.to_string(),
                format!("{:.3}", r.pbm_mean_rmse),
                format!("{:.3}", r.hpbm_mean_rmse),
                r.improvement_pct().to_string(),
            ]
        })
        .collect();

    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in &cells {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }

    let mut out = String::new();
    let line = |fields: &[String], widths: &[usize]| -> String {
        let cols: Vec<String> = fields
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (f, w))| {
                // Left-align the site name, right-align the numbers.
                if i == 0 {
                    format!("{f:<w$}")
                } else {
                    format!("{f:>w$}")
                }
            })
            .collect();
        cols.join("  ")
    };
    let header_fields: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    out.push_str(line(&header_fields, &widths).trim_end());
    out.push('\n');
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&rule.join("  "));
    out.push('\n');
    for row in &cells {
        out.push_str(line(row.as_slice(), &widths).trim_end());
        out.push('\n');
    }
    out
}

/// Parse one line of `summary.csv`. Site names are validated to be
/// filename-safe at config load, so no CSV quoting can appear here.
fn parse_summary_line(line: &str, lineno: usize) -> Result<SummaryRow> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 6 {
        bail!("summary.csv line {lineno}: expected 6 fields, got {}", fields.len());
    }
    let years: usize = fields[1]
        .parse()
        .with_context(|| format!("summary.csv line {lineno}: bad year count"))?;
    let pbm: f64 = fields[2]
        .parse()
        .with_context(|| format!("summary.csv line {lineno}: bad PBM mean"))?;
    // Headline hybrid column: in-sample when present, else oracle.
    let hybrid_field = if !fields[3].is_empty() { fields[3] } else { fields[4] };
    if hybrid_field.is_empty() {
        bail!("summary.csv line {lineno}: no hybrid RMSE column");
    }
    let hpbm: f64 = hybrid_field
        .parse()
        .with_context(|| format!("summary.csv line {lineno}: bad hybrid mean"))?;
    Ok(SummaryRow { site: fields[0].to_string(), years, pbm_mean_rmse: pbm, hpbm_mean_rmse: hpbm })
}

/// Re-render the summary table from a completed run directory.
pub fn cmd_report(run_dir: &Path) -> Result<()> {
    let path = run_dir.join("summary.csv");
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.starts_with("site,years,pbm_mean_rmse") => {}
        _ => bail!("{} is not a run summary", path.display()),
    }
    let rows: Vec<SummaryRow> = lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_summary_line(l, i + 2))
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        bail!("{} contains no sites", path.display());
    }
    print!("{}", render_table(&rows));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(site: &str, years: usize, pbm: f64, hpbm: f64) -> SummaryRow {
        SummaryRow { site: site.into(), years, pbm_mean_rmse: pbm, hpbm_mean_rmse: hpbm }
    }

    #[test]
    fn improvement_is_recomputed_from_means() {
        // Rounded display of the means would give a different percentage;
        // the table must use full precision.
        let r = row("alpine", 9, 0.061, 0.02);
        assert_eq!(r.improvement_pct(), 67);
    }

    #[test]
    fn table_is_aligned_and_complete() {
        let rows = vec![row("alpine", 9, 0.053, 0.041), row("b", 4, 0.04, 0.013)];
        let table = render_table(&rows);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].contains("Site"));
        assert!(lines[0].contains("%Improvement"));
        assert!(lines[2].starts_with("alpine"));
        assert!(lines[2].ends_with("23"));
        assert!(lines[3].ends_with("68"));
    }

    #[test]
    fn summary_lines_parse_and_prefer_in_sample() {
        let r = parse_summary_line("alpine,9,0.061,0.02,0.03,", 2).unwrap();
        assert_eq!(r.site, "alpine");
        assert_eq!(r.hpbm_mean_rmse, 0.02);
        let r = parse_summary_line("alpine,9,0.061,,0.03,", 2).unwrap();
        assert_eq!(r.hpbm_mean_rmse, 0.03);
        assert!(parse_summary_line("alpine,9,0.061,,,", 2).is_err());
        assert!(parse_summary_line("alpine,9,0.061", 2).is_err());
    }
}
