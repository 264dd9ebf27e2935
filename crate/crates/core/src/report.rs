//! CSV rows and JSON summaries written by the study runner.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// One CSV line of a study report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub study: String,
    pub model: String,
    pub f: String,
    pub t: f64,
    pub x: String,
    pub n: usize,
    #[serde(rename = "N")]
    pub samples: usize,
    pub estimate: f64,
    pub truth: f64,
    pub bias: f64,
    pub ci_halfwidth: f64,
    pub oracle: String,
}

pub const CSV_HEADER: [&str; 12] = ["study", "model", "f", "t", "x", "n", "N", "estimate", "truth", "bias", "ci_halfwidth", "oracle"];

/// Formats a point as `a;b;…` so it fits one CSV field.
pub fn format_point(x: &[f64]) -> String {
    x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Gate {
    pub name: String,
    pub value: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub pass: bool,
}

impl Gate {
    pub fn within(name: &str, value: f64, lower: Option<f64>, upper: Option<f64>) -> Self {
        let pass = value.is_finite() && lower.is_none_or(|l| value >= l) && upper.is_none_or(|u| value <= u);
        Self { name: name.into(), value, lower, upper, pass }
    }

    pub fn at_most(name: &str, value: f64, upper: f64) -> Self {
        Self::within(name, value, None, Some(upper))
    }

    pub fn flag(name: &str, pass: bool) -> Self {
        Self { name: name.into(), value: if pass { 1.0 } else { 0.0 }, lower: Some(1.0), upper: None, pass }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub name: String,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub r_squared: Option<f64>,
    pub used_points: usize,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub study: String,
    pub model: String,
    pub function: String,
    pub seed: u64,
    pub status: String,
    pub gates: Vec<Gate>,
    pub fits: Vec<FitSummary>,
    pub values: Vec<(String, f64)>,
    pub oracles: Vec<String>,
    pub rows: usize,
}

impl Summary {
    pub fn failing_gates(&self) -> Vec<&Gate> {
        self.gates.iter().filter(|g| !g.pass).collect()
    }
}

pub fn csv_bytes(rows: &[ReportRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn json_bytes(summary: &Summary) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(summary)?;
    v.push(b'\n');
    Ok(v)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut file = fs::File::create(path)?;
    file.write_all(bytes)?;
    Ok(())
}

/// Writes the CSV rows and the JSON summary.
pub fn emit_report(rows: &[ReportRow], summary: &Summary, csv_path: &Path, json_path: &Path) -> Result<()> {
    write_file(csv_path, &csv_bytes(rows)?)?;
    write_file(json_path, &json_bytes(summary)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> ReportRow {
        ReportRow {
            study: "weak-rate".into(),
            model: "gbm".into(),
            f: "identity".into(),
            t: 1.0,
            x: format_point(&[1.0, 0.5]),
            n: 8,
            samples: 1000,
            estimate: 1.1,
            truth: 1.105,
            bias: -0.005,
            ci_halfwidth: 1e-4,
            oracle: "exact".into(),
        }
    }

    #[test]
    fn empty_rows_give_header_only() {
        let b = csv_bytes(&[]).unwrap();
        assert_eq!(String::from_utf8(b).unwrap(), "study,model,f,t,x,n,N,estimate,truth,bias,ci_halfwidth,oracle\n");
    }

    #[test]
    fn one_row_gives_two_lines() {
        let s = String::from_utf8(csv_bytes(&[row()]).unwrap()).unwrap();
        let lines: Vec<&str> = s.split_terminator('\n').collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1], "weak-rate,gbm,identity,1.0,1;0.5,8,1000,1.1,1.105,-0.005,0.0001,exact");
        assert!(!s.contains('\r'));
    }

    #[test]
    fn fields_with_commas_are_quoted() {
        let mut r = row();
        r.f = "call(K=1), spread".into();
        let s = String::from_utf8(csv_bytes(&[r]).unwrap()).unwrap();
        assert!(s.contains("\"call(K=1), spread\""));
    }

    #[test]
    fn gates() {
        assert!(Gate::within("slope", -1.0, Some(-1.05), Some(-0.95)).pass);
        assert!(!Gate::at_most("x", f64::NAN, 1.0).pass);
        assert!(!Gate::flag("f", false).pass);
    }
}
