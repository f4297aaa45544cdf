//! Site data files: half-hourly forcing plus optional moisture observations.
//!
//! The on-disk format is a CSV with header
//! `timestamp,precip_mm,air_temp_c,pet_mm,theta_obs`, RFC 3339 timestamps at
//! a strict 30-minute cadence, and an empty `theta_obs` field wherever the
//! sensor record has a gap. Floats are written with Rust's shortest
//! round-trip formatting, so write → read is lossless.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};

use crate::error::{Error, Result};
use crate::pbm::Forcing;
use crate::training::SiteSeries;

/// Data cadence. Everything downstream assumes half-hourly steps.
pub const STEP_SECONDS: i64 = 1800;

const HEADER: &str = "timestamp,precip_mm,air_temp_c,pet_mm,theta_obs";

/// A parsed site record: aligned forcing and observation series.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteData {
    /// Timestamp of the first row.
    pub start: DateTime<Utc>,
    pub forcing: Vec<Forcing>,
    pub observations: Vec<Option<f64>>,
}

impl SiteData {
    pub fn len(&self) -> usize {
        self.forcing.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forcing.is_empty()
    }

    /// Timestamp of row `i`.
    pub fn timestamp(&self, i: usize) -> DateTime<Utc> {
        self.start + chrono::Duration::seconds(STEP_SECONDS * i as i64)
    }

    /// Package as an experiment series, enforcing whole years.
    pub fn into_series(self, name: &str, steps_per_year: usize) -> Result<SiteSeries> {
        let series = SiteSeries {
            name: name.to_string(),
            forcing: self.forcing,
            observations: self.observations,
            steps_per_year,
        };
        series.validate()?;
        Ok(series)
    }
}

fn site_err(line: usize, message: impl Into<String>) -> Error {
    Error::SiteData { line, message: message.into() }
}

/// Parse a site CSV from any reader. Errors carry 1-based line numbers.
pub fn read_site_data<R: Read>(reader: R) -> Result<SiteData> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);

    let mut start: Option<DateTime<Utc>> = None;
    let mut prev: Option<DateTime<Utc>> = None;
    let mut forcing = Vec::new();
    let mut observations = Vec::new();

    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 1;
        let record = record.map_err(|e| site_err(line, e.to_string()))?;
        if idx == 0 {
            let header = record.iter().collect::<Vec<_>>().join(",");
            if header != HEADER {
                return Err(site_err(1, format!("expected header `{HEADER}`, got `{header}`")));
            }
            continue;
        }
        if record.len() != 5 {
            return Err(site_err(line, format!("expected 5 fields, got {}", record.len())));
        }

        let ts = DateTime::parse_from_rfc3339(&record[0])
            .map_err(|e| site_err(line, format!("bad timestamp `{}`: {e}", &record[0])))?
            .with_timezone(&Utc);
        if let Some(p) = prev {
            let dt = (ts - p).num_seconds();
            if dt != STEP_SECONDS {
                return Err(site_err(
                    line,
                    format!("timestamp step {dt} s, expected {STEP_SECONDS} s"),
                ));
            }
        }
        start.get_or_insert(ts);
        prev = Some(ts);

        let num = |field: usize, name: &str| -> Result<f64> {
            let raw = &record[field];
            let v: f64 = raw
                .parse()
                .map_err(|_| site_err(line, format!("bad {name} `{raw}`")))?;
            if !v.is_finite() {
                return Err(site_err(line, format!("non-finite {name} `{raw}`")));
            }
            Ok(v)
        };
        let precip_mm = num(1, "precip_mm")?;
        let air_temp_c = num(2, "air_temp_c")?;
        let pet_mm = num(3, "pet_mm")?;
        if precip_mm < 0.0 {
            return Err(site_err(line, format!("negative precip_mm {precip_mm}")));
        }
        if pet_mm < 0.0 {
            return Err(site_err(line, format!("negative pet_mm {pet_mm}")));
        }
        forcing.push(Forcing { precip_mm, air_temp_c, pet_mm });

        let theta = record[4].trim();
        observations.push(if theta.is_empty() {
            None
        } else {
            let v = num(4, "theta_obs")?;
            Some(v)
        });
    }

    let Some(start) = start else {
        return Err(site_err(1, "empty file"));
    };
    if forcing.is_empty() {
        return Err(site_err(2, "no data rows"));
    }
    Ok(SiteData { start, forcing, observations })
}

/// Read a site CSV from disk.
pub fn read_site_csv(path: &Path) -> Result<SiteData> {
    let file = File::open(path)?;
    read_site_data(BufReader::new(file))
}

/// Write a site CSV to any writer.
pub fn write_site_data<W: Write>(
    writer: W,
    start: DateTime<Utc>,
    forcing: &[Forcing],
    observations: &[Option<f64>],
) -> Result<()> {
    if forcing.len() != observations.len() {
        return Err(Error::InvalidData(format!(
            "forcing length {} != observation length {}",
            forcing.len(),
            observations.len()
        )));
    }
    if forcing.is_empty() {
        return Err(Error::InvalidData("empty series".into()));
    }
    let mut w = BufWriter::new(writer);
    writeln!(w, "{HEADER}")?;
    for (i, (f, obs)) in forcing.iter().zip(observations).enumerate() {
        let ts = start + chrono::Duration::seconds(STEP_SECONDS * i as i64);
        write!(
            w,
            "{},{},{},{},",
            ts.to_rfc3339_opts(SecondsFormat::Secs, true),
            f.precip_mm,
            f.air_temp_c,
            f.pet_mm
        )?;
        match obs {
            Some(v) => writeln!(w, "{v}")?,
            None => writeln!(w)?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Write a site CSV to disk.
pub fn write_site_csv(
    path: &Path,
    start: DateTime<Utc>,
    forcing: &[Forcing],
    observations: &[Option<f64>],
) -> Result<()> {
    let file = File::create(path)?;
    write_site_data(file, start, forcing, observations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic_site, truth_params, WeatherConfig};
    use chrono::TimeZone;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2001, 1, 1, 0, 0, 0).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let weather = WeatherConfig { days_per_year: 3, ..WeatherConfig::default() };
        let site = generate_synthetic_site(9, 1, &truth_params(), 0.01, &weather).unwrap();
        let mut obs = site.observations.clone();
        obs[5] = None;
        obs[100] = None;

        let mut buf = Vec::new();
        write_site_data(&mut buf, t0(), &site.forcing, &obs).unwrap();
        let parsed = read_site_data(buf.as_slice()).unwrap();

        assert_eq!(parsed.start, t0());
        assert_eq!(parsed.forcing, site.forcing);
        assert_eq!(parsed.observations, obs);
    }

    #[test]
    fn rejects_wrong_header() {
        let text = "time,precip_mm,air_temp_c,pet_mm,theta_obs\n";
        match read_site_data(text.as_bytes()) {
            Err(Error::SiteData { line: 1, .. }) => {}
            other => panic!("expected header rejection, got {other:?}"),
        }
    }

    #[test]
    fn rejects_irregular_cadence_with_line_number() {
        let text = "timestamp,precip_mm,air_temp_c,pet_mm,theta_obs\n\
                    2001-01-01T00:00:00Z,0,1.5,0,0.3\n\
                    2001-01-01T00:30:00Z,0,1.5,0,0.3\n\
                    2001-01-01T01:30:00Z,0,1.5,0,0.3\n";
        match read_site_data(text.as_bytes()) {
            Err(Error::SiteData { line: 4, message }) => {
                assert!(message.contains("3600"), "{message}");
            }
            other => panic!("expected cadence rejection, got {other:?}"),
        }
    }

    #[test]
    fn rejects_backwards_timestamps() {
        let text = "timestamp,precip_mm,air_temp_c,pet_mm,theta_obs\n\
                    2001-01-01T01:00:00Z,0,1.5,0,0.3\n\
                    2001-01-01T00:30:00Z,0,1.5,0,0.3\n";
        assert!(matches!(
            read_site_data(text.as_bytes()),
            Err(Error::SiteData { line: 3, .. })
        ));
    }

    #[test]
    fn rejects_missing_forcing_field() {
        let text = "timestamp,precip_mm,air_temp_c,pet_mm,theta_obs\n\
                    2001-01-01T00:00:00Z,,1.5,0,0.3\n";
        match read_site_data(text.as_bytes()) {
            Err(Error::SiteData { line: 2, message }) => {
                assert!(message.contains("precip_mm"), "{message}");
            }
            other => panic!("expected forcing rejection, got {other:?}"),
        }
    }

    #[test]
    fn rejects_negative_precip() {
        let text = "timestamp,precip_mm,air_temp_c,pet_mm,theta_obs\n\
                    2001-01-01T00:00:00Z,-0.1,1.5,0,0.3\n";
        assert!(matches!(
            read_site_data(text.as_bytes()),
            Err(Error::SiteData { line: 2, .. })
        ));
    }

    #[test]
    fn theta_gaps_are_allowed() {
        let text = "timestamp,precip_mm,air_temp_c,pet_mm,theta_obs\n\
                    2001-01-01T00:00:00Z,0,1.5,0,0.3\n\
                    2001-01-01T00:30:00Z,0.2,1.5,0.01,\n\
                    2001-01-01T01:00:00Z,0,1.5,0,0.31\n";
        let parsed = read_site_data(text.as_bytes()).unwrap();
        assert_eq!(parsed.observations, vec![Some(0.3), None, Some(0.31)]);
    }

    #[test]
    fn offset_timestamps_normalize_to_utc() {
        let text = "timestamp,precip_mm,air_temp_c,pet_mm,theta_obs\n\
                    2001-01-01T02:00:00+02:00,0,1.5,0,0.3\n\
                    2001-01-01T02:30:00+02:00,0,1.5,0,0.3\n";
        let parsed = read_site_data(text.as_bytes()).unwrap();
        assert_eq!(parsed.start, t0());
    }

    #[test]
    fn into_series_requires_whole_years() {
        let weather = WeatherConfig { days_per_year: 2, ..WeatherConfig::default() };
        let site = generate_synthetic_site(9, 1, &truth_params(), 0.0, &weather).unwrap();
        let data = SiteData {
            start: t0(),
            forcing: site.forcing.clone(),
            observations: site.observations.clone(),
        };
        assert!(data.clone().into_series("s", weather.steps_per_year()).is_ok());
        assert!(data.into_series("s", weather.steps_per_year() + 1).is_err());
    }
}
