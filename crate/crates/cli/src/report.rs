//! Training curves as SVG plus a JSON summary re-read from a run's CSV logs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::rundir::{LOGS, REPORTS};

/// One parsed CSV log: the first column is the x axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LogTable {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl LogTable {
    pub fn read(path: &Path) -> CliResult<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::csv(path, e))?;
        let columns: Vec<String> = reader
            .headers()
            .map_err(|e| CliError::csv(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| CliError::csv(path, e))?;
            let row = rec
                .iter()
                .map(|v| v.trim().parse::<f64>().map_err(|_| CliError::csv(path, format!("non-numeric value {v:?}"))))
                .collect::<CliResult<Vec<f64>>>()?;
            rows.push(row);
        }
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(LogTable { name, columns, rows })
    }

    pub fn series(&self, col: usize) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r[0], r[col])).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeriesSummary {
    pub last: f64,
    pub min: f64,
    pub max: f64,
    pub svg: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogSummary {
    pub rows: usize,
    pub x: String,
    pub series: BTreeMap<String, SeriesSummary>,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;

fn fmt_num(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-3) {
        format!("{v:.3e}")
    } else {
        format!("{v:.4}")
    }
}

/// A single-series line chart with labelled axes.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let finite: Vec<(f64, f64)> = points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if finite.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
    let (l, r, t, b) = (PAD, W - PAD, PAD, H - PAD);
    let _ = writeln!(s, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#);
    let _ = writeln!(s, r#"<text x="{l}" y="{}" text-anchor="middle">{}</text>"#, b + 16.0, fmt_num(x0));
    let _ = writeln!(s, r#"<text x="{r}" y="{}" text-anchor="middle">{}</text>"#, b + 16.0, fmt_num(x1));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, l - 4.0, b, fmt_num(y0));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, l - 4.0, t + 4.0, fmt_num(y1));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    if !finite.is_empty() {
        let pts: Vec<String> = finite.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" stroke="#1f77b4" stroke-width="1.5" fill="none"/>"##,
            pts.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn find_logs(run: &Path) -> CliResult<Vec<PathBuf>> {
    let dir = run.join(LOGS);
    let mut logs: Vec<PathBuf> = match fs::read_dir(&dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .collect(),
        Err(_) => Vec::new(),
    };
    if logs.is_empty() {
        return Err(CliError::MissingLogs(dir));
    }
    logs.sort();
    Ok(logs)
}

/// Writes `reports/<log>_<column>.svg` per series and `reports/summary.json`.
pub fn write_report(run: &Path) -> CliResult<PathBuf> {
    let logs = find_logs(run)?;
    let reports = run.join(REPORTS);
    fs::create_dir_all(&reports).map_err(|e| CliError::io(&reports, e))?;
    let mut summary = BTreeMap::new();
    for path in logs {
        let table = LogTable::read(&path)?;
        let mut series = BTreeMap::new();
        for (c, col) in table.columns.iter().enumerate().skip(1) {
            let pts = table.series(c);
            let svg_name = format!("{}_{col}.svg", table.name);
            let svg_path = reports.join(&svg_name);
            let title = format!("{} {col}", table.name);
            fs::write(&svg_path, line_chart_svg(&title, &table.columns[0], col, &pts))
                .map_err(|e| CliError::io(&svg_path, e))?;
            let ys = pts.iter().map(|p| p.1);
            series.insert(
                col.clone(),
                SeriesSummary {
                    last: pts.last().map_or(f64::NAN, |p| p.1),
                    min: ys.clone().fold(f64::INFINITY, f64::min),
                    max: ys.fold(f64::NEG_INFINITY, f64::max),
                    svg: format!("{REPORTS}/{svg_name}"),
                },
            );
        }
        summary.insert(
            table.name.clone(),
            LogSummary {
                rows: table.rows.len(),
                x: table.columns.first().cloned().unwrap_or_default(),
                series,
            },
        );
    }
    let mut doc = serde_json::json!({ "logs": summary });
    let eval = reports.join("eval.json");
    if eval.is_file() {
        let text = fs::read_to_string(&eval).map_err(|e| CliError::io(&eval, e))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::csv(&eval, e))?;
        doc["eval"] = v;
    }
    let out = reports.join("summary.json");
    fs::write(&out, serde_json::to_string_pretty(&doc).expect("summary serialises")).map_err(|e| CliError::io(&out, e))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_handles_flat_and_empty_series() {
        let flat = line_chart_svg("t", "x", "y", &[(0.0, 1.0), (1.0, 1.0)]);
        assert!(flat.contains("<polyline"));
        assert!(!flat.contains("NaN"));
        let empty = line_chart_svg("t", "x", "y", &[]);
        assert!(!empty.contains("<polyline"));
    }

    #[test]
    fn summary_matches_csv() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join(LOGS)).unwrap();
        fs::write(dir.path().join("logs/anomaly.csv"), "epoch,loss,acc\n0,0.9,0.5\n1,0.4,0.75\n2,0.5,1\n").unwrap();
        let out = write_report(dir.path()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
        let loss = &v["logs"]["anomaly"]["series"]["loss"];
        assert_eq!(loss["last"], 0.5);
        assert_eq!(loss["min"], 0.4);
        assert_eq!(loss["max"], 0.9);
        assert_eq!(v["logs"]["anomaly"]["rows"], 3);
        assert!(dir.path().join("reports/anomaly_acc.svg").is_file());
        assert!(v.get("eval").is_none());
    }

    #[test]
    fn no_logs_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(write_report(dir.path()), Err(CliError::MissingLogs(_))));
    }
}
