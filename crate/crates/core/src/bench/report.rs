use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{BenchReport, Method};
use crate::error::{Error, Result};

pub const CSV_COLUMNS: [&str; 9] = [
    "method",
    "src_features",
    "tgt_features",
    "coarse_rmse_mm",
    "fine_rmse_mm",
    "t_coarse_s",
    "t_fine_s",
    "t_total_s",
    "converged",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "md" | "markdown" => Ok(Self::Markdown),
            other => Err(Error::InvalidInput(format!("unknown report format {other:?}"))),
        }
    }
}

impl ReportFormat {
    /// Format implied by a file extension; CSV when unknown.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::Json,
            Some("md") | Some("markdown") => Self::Markdown,
            _ => Self::Csv,
        }
    }
}

/// One CSV data line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub method: Method,
    pub src_features: usize,
    pub tgt_features: usize,
    pub coarse_rmse_mm: Option<f64>,
    pub fine_rmse_mm: Option<f64>,
    pub t_coarse_s: f64,
    pub t_fine_s: f64,
    pub t_total_s: f64,
    pub converged: bool,
}

/// Nine significant digits.
fn num(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if (-4..9).contains(&mag) {
        let decimals = (8 - mag).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.8e}")
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

pub fn report_emit(r: &BenchReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(r)? + "\n"),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_COLUMNS)?;
            for row in &r.rows {
                w.write_record([
                    row.method.name().to_string(),
                    row.src_features.to_string(),
                    row.tgt_features.to_string(),
                    opt(row.coarse_rmse_mm),
                    opt(row.fine_rmse_mm),
                    num(row.t_coarse_s),
                    num(row.t_fine_s),
                    num(row.t_total_s),
                    row.converged.to_string(),
                ])?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        ReportFormat::Markdown => Ok(markdown(r)),
    }
}

fn markdown(r: &BenchReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "## Registration RMSE (mm)\n");
    let _ = writeln!(s, "| Method | Coarse RMSE | Fine RMSE | Converged | Note |");
    let _ = writeln!(s, "|---|---|---|---|---|");
    for row in &r.rows {
        let note = row.error.clone().unwrap_or_else(|| if row.converged { String::new() } else { "failed registration".into() });
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} |",
            row.method,
            opt(row.coarse_rmse_mm),
            opt(row.fine_rmse_mm),
            if row.converged { "yes" } else { "no" },
            note
        );
    }
    let _ = writeln!(s, "\n## Features and time (s, mean of {} trials)\n", r.trials);
    let _ = writeln!(s, "| Method | Features (src vs. tgt) | T_c | T_f | T_t | Extraction |");
    let _ = writeln!(s, "|---|---|---|---|---|---|");
    for row in &r.rows {
        let _ = writeln!(
            s,
            "| {} | {} vs. {} | {} | {} | {} | {} |",
            row.method,
            row.src_features,
            row.tgt_features,
            num(row.t_coarse_s),
            num(row.t_fine_s),
            num(row.t_total_s),
            num(row.t_extract_s)
        );
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != CSV_COLUMNS {
        return Err(Error::Parse(format!("unexpected CSV header {header:?}")));
    }
    rdr.deserialize()
        .map(|r| r.map_err(|e: csv::Error| Error::Parse(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::MethodRow;
    use super::*;

    fn row(method: Method, fine: Option<f64>) -> MethodRow {
        MethodRow {
            method,
            src_features: 21,
            tgt_features: 20,
            coarse_rmse_mm: fine.map(|f| f * 2.0),
            fine_rmse_mm: fine,
            t_coarse_s: 0.000123456789123,
            t_fine_s: 1.0 / 3.0,
            t_total_s: 0.000123456789123 + 1.0 / 3.0,
            t_extract_s: 0.5,
            converged: fine.is_some_and(|f| f < 2.0),
            rotation_error_deg: None,
            translation_error_mm: None,
            error: fine.is_none().then(|| "correspondence starvation".to_string()),
        }
    }

    fn close9(a: f64, b: f64) -> bool {
        a == b || ((a - b) / a.abs().max(b.abs())).abs() < 5e-9
    }

    #[test]
    fn empty_report_is_header_only() {
        let csv = report_emit(&BenchReport { trials: 1, rows: vec![] }, ReportFormat::Csv).unwrap();
        assert_eq!(csv, CSV_COLUMNS.join(",") + "\n");
        assert!(parse_csv(&csv).unwrap().is_empty());
    }

    #[test]
    fn one_row_one_line() {
        let r = BenchReport {
            trials: 3,
            rows: vec![row(Method::Ours, Some(0.995913))],
        };
        let csv = report_emit(&r, ReportFormat::Csv).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("ours,21,20,1.991826,0.995913,"));
    }

    #[test]
    fn json_csv_round_trip() {
        let r = BenchReport {
            trials: 3,
            rows: vec![row(Method::Ours, Some(0.995913)), row(Method::Sift, None), row(Method::Iss, Some(123456.0))],
        };
        let json = report_emit(&r, ReportFormat::Json).unwrap();
        let back: BenchReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        let parsed = parse_csv(&report_emit(&back, ReportFormat::Csv).unwrap()).unwrap();
        assert_eq!(parsed.len(), 3);
        for (p, o) in parsed.iter().zip(&r.rows) {
            assert_eq!(p.method, o.method);
            assert_eq!((p.src_features, p.tgt_features, p.converged), (o.src_features, o.tgt_features, o.converged));
            assert_eq!(p.fine_rmse_mm.is_some(), o.fine_rmse_mm.is_some());
            if let (Some(a), Some(b)) = (p.fine_rmse_mm, o.fine_rmse_mm) {
                assert!(close9(a, b));
            }
            for (a, b) in [(p.t_coarse_s, o.t_coarse_s), (p.t_fine_s, o.t_fine_s), (p.t_total_s, o.t_total_s)] {
                assert!(close9(a, b), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn number_format() {
        assert_eq!(num(0.0), "0");
        assert_eq!(num(1.0 / 3.0), "0.333333333");
        assert_eq!(num(2.06693), "2.06693");
        assert_eq!(num(1.5e-7), "1.50000000e-7");
        assert_eq!(num(123456789.0), "123456789");
    }

    #[test]
    fn markdown_lists_failures() {
        let r = BenchReport {
            trials: 3,
            rows: vec![row(Method::Ours, Some(0.9)), row(Method::Harris, Some(7.5))],
        };
        let md = report_emit(&r, ReportFormat::Markdown).unwrap();
        assert!(md.contains("| harris | 15 | 7.5 | no | failed registration |"));
        assert!(md.contains("21 vs. 20"));
        assert!(md.contains("mean of 3 trials"));
    }
}
