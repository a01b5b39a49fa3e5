//! Result rows and their CSV form.

use std::io::Write;
use std::path::Path;

use crate::CliError;

pub const CSV_HEADER: [&str; 7] = ["experiment", "param", "value_name", "mean", "std", "repeats", "seconds"];

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment: String,
    /// `name=value` pairs joined by `;`.
    pub param: String,
    pub value_name: String,
    pub mean: f64,
    pub std: f64,
    pub repeats: usize,
    pub seconds: f64,
}

impl ResultRow {
    pub fn from_samples(experiment: &str, param: String, value_name: &str, samples: &[f64], seconds: f64) -> Self {
        let (mean, std) = mean_std(samples);
        Self {
            experiment: experiment.to_string(),
            param,
            value_name: value_name.to_string(),
            mean,
            std,
            repeats: samples.len(),
            seconds,
        }
    }
}

/// Mean and sample standard deviation (0 for a single sample).
pub fn mean_std(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() == 1 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(|e| CliError::Io(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.experiment.clone(),
            r.param.clone(),
            r.value_name.clone(),
            r.mean.to_string(),
            r.std.to_string(),
            r.repeats.to_string(),
            r.seconds.to_string(),
        ])
        .map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}

pub fn save_csv(rows: &[ResultRow], path: &Path) -> Result<(), CliError> {
    let file = std::fs::File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    write_csv(rows, std::io::BufWriter::new(file))
}

/// Parses a results CSV written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Io(e.to_string()))?;
    let headers = r.headers().map_err(|e| CliError::Io(e.to_string()))?.clone();
    if headers.iter().ne(CSV_HEADER) {
        return Err(CliError::Input(format!("unexpected CSV header {headers:?}")));
    }
    let parse_f = |s: &str| s.parse::<f64>().map_err(|e| CliError::Input(format!("{s}: {e}")));
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::Io(e.to_string()))?;
        rows.push(ResultRow {
            experiment: rec[0].to_string(),
            param: rec[1].to_string(),
            value_name: rec[2].to_string(),
            mean: parse_f(&rec[3])?,
            std: parse_f(&rec[4])?,
            repeats: rec[5].parse().map_err(|e| CliError::Input(format!("{}: {e}", &rec[5])))?,
            seconds: parse_f(&rec[6])?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![ResultRow::from_samples("noise", "sigma=1;model=WB".into(), "relative_error", &[0.1, 0.3], 0.0)];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        save_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("experiment,param,value_name,mean,std,repeats,seconds\n"));
        assert_eq!(read_csv(&path).unwrap(), rows);
    }
}
