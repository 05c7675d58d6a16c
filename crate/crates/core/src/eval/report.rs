//! CSV reports. Floats are written in shortest round-trip form, so reading a
//! file back reproduces every value exactly. Noiseless conditions are written
//! as an SNR of `inf`, random correlation as `random`.

use std::path::Path;

use super::sweep::{SweepReport, SweepRow};
use super::timing::{TimingReport, TimingRow};
use crate::error::{Error, Result};
use crate::forward::Snr;
use crate::signal::Correlation;

pub const ACCURACY_COLUMNS: [&str; 9] = [
    "condition_snr_db",
    "condition_corr",
    "q",
    "n_samples",
    "localizer",
    "trials",
    "mean_error_m",
    "stderr_m",
    "mean_elapsed_s",
];
/// Extra trailing column of robustness reports.
pub const RHO_COLUMN: &str = "rho";
pub const TIMING_COLUMNS: [&str; 5] = ["algorithm", "q", "n_samples", "median_ms", "repeats"];

fn corr_text(c: Correlation) -> String {
    match c {
        Correlation::Fixed(v) => v.to_string(),
        Correlation::Random => "random".into(),
    }
}

fn parse<T: std::str::FromStr>(field: &str, column: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("bad value {field:?} in column {column}")))
}

pub fn write_sweep_csv(report: &SweepReport, path: &Path) -> Result<()> {
    let with_rho = report.rows.iter().any(|r| r.rho.is_some());
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = ACCURACY_COLUMNS.to_vec();
    if with_rho {
        header.push(RHO_COLUMN);
    }
    w.write_record(&header)?;
    for r in &report.rows {
        let mut rec = vec![
            r.snr.to_f64().to_string(),
            corr_text(r.correlation),
            r.n_sources.to_string(),
            r.n_samples.to_string(),
            r.localizer.clone(),
            r.trials.to_string(),
            r.mean_error_m.to_string(),
            r.stderr_m.to_string(),
            r.mean_elapsed_s.to_string(),
        ];
        if with_rho {
            rec.push(r.rho.map_or(String::new(), |v| v.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(path: &Path) -> Result<SweepReport> {
    let mut rd = csv::Reader::from_path(path)?;
    let header = rd.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    let with_rho = match names.len() {
        9 => false,
        10 if names[9] == RHO_COLUMN => true,
        _ => return Err(Error::Format(format!("unexpected header {names:?}"))),
    };
    if names[..9] != ACCURACY_COLUMNS {
        return Err(Error::Format(format!("unexpected header {names:?}")));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let f = |i: usize| &rec[i];
        let corr = match f(1) {
            "random" => Correlation::Random,
            s => Correlation::Fixed(parse(s, ACCURACY_COLUMNS[1])?),
        };
        rows.push(SweepRow {
            snr: Snr::from_f64(parse(f(0), ACCURACY_COLUMNS[0])?),
            correlation: corr,
            n_sources: parse(f(2), "q")?,
            n_samples: parse(f(3), "n_samples")?,
            localizer: f(4).to_string(),
            trials: parse(f(5), "trials")?,
            mean_error_m: parse(f(6), "mean_error_m")?,
            stderr_m: parse(f(7), "stderr_m")?,
            mean_elapsed_s: parse(f(8), "mean_elapsed_s")?,
            rho: match with_rho && !f(9).is_empty() {
                true => Some(parse(f(9), RHO_COLUMN)?),
                false => None,
            },
        });
    }
    Ok(SweepReport { rows })
}

pub fn write_timing_csv(report: &TimingReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TIMING_COLUMNS)?;
    for r in &report.rows {
        w.write_record([
            r.algorithm.clone(),
            r.n_sources.to_string(),
            r.n_samples.to_string(),
            r.median_ms.to_string(),
            r.repeats.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_timing_csv(path: &Path) -> Result<TimingReport> {
    let mut rd = csv::Reader::from_path(path)?;
    if rd.headers()?.iter().ne(TIMING_COLUMNS) {
        return Err(Error::Format("unexpected timing header".into()));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        rows.push(TimingRow {
            algorithm: rec[0].to_string(),
            n_sources: parse(&rec[1], "q")?,
            n_samples: parse(&rec[2], "n_samples")?,
            median_ms: parse(&rec[3], "median_ms")?,
            repeats: parse(&rec[4], "repeats")?,
        });
    }
    Ok(TimingReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn sample_row() -> SweepRow {
        SweepRow {
            snr: Snr::Db(-7.5),
            correlation: Correlation::Fixed(0.3),
            n_sources: 2,
            n_samples: 16,
            localizer: "rap_music".into(),
            trials: 200,
            mean_error_m: 0.012_345_678_901_234_5,
            stderr_m: 1.0 / 3.0,
            mean_elapsed_s: 0.0,
            rho: None,
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_sweep_csv(&SweepReport::default(), &p).unwrap();
        assert_eq!(
            fs::read_to_string(&p).unwrap(),
            format!("{}\n", ACCURACY_COLUMNS.join(","))
        );
        assert_eq!(read_sweep_csv(&p).unwrap(), SweepReport::default());
    }

    #[test]
    fn sweep_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let one = SweepReport {
            rows: vec![sample_row()],
        };
        write_sweep_csv(&one, &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 2);
        assert_eq!(read_sweep_csv(&p).unwrap(), one);

        let mut noiseless = sample_row();
        noiseless.snr = Snr::Noiseless;
        noiseless.correlation = Correlation::Random;
        let many = SweepReport {
            rows: vec![
                SweepRow {
                    rho: Some(0.05),
                    ..sample_row()
                },
                SweepRow {
                    rho: Some(0.0),
                    ..noiseless
                },
            ],
        };
        write_sweep_csv(&many, &p).unwrap();
        assert!(fs::read_to_string(&p)
            .unwrap()
            .starts_with(&format!("{},rho\n", ACCURACY_COLUMNS.join(","))));
        assert_eq!(read_sweep_csv(&p).unwrap(), many);
    }

    #[test]
    fn timing_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let report = TimingReport {
            rows: vec![TimingRow {
                algorithm: "mlp".into(),
                n_sources: 3,
                n_samples: 1,
                median_ms: 6.125_000_1,
                repeats: 20,
            }],
        };
        write_timing_csv(&report, &p).unwrap();
        assert_eq!(
            fs::read_to_string(&p).unwrap().lines().next().unwrap(),
            TIMING_COLUMNS.join(",")
        );
        assert_eq!(read_timing_csv(&p).unwrap(), report);
    }

    #[test]
    fn wrong_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_sweep_csv(&p), Err(Error::Format(_))));
        assert!(matches!(read_timing_csv(&p), Err(Error::Format(_))));
    }

    #[test]
    fn unwritable_path_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("missing").join("a.csv");
        assert!(write_sweep_csv(&SweepReport::default(), &p).is_err());
    }
}
