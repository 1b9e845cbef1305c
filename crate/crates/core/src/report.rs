//! Reads a run's metrics back and renders learning curves as SVG.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::{METRICS_FILE, METRICS_HEADER};

pub const REPORT_FILE: &str = "report.svg";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: u32,
    pub category: String,
    pub ap: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub frozen_count: usize,
    pub box_ratio: f64,
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, name: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::data(path, format!("line {line}, column {name}"), format!("cannot parse {raw:?}")))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        _ => return Err(Error::data(path, "line 1", format!("expected header {METRICS_HEADER}"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(Error::data(path, format!("line {n}"), format!("expected 7 columns, found {}", cols.len())));
        }
        let ap = if cols[2].trim().is_empty() {
            None
        } else {
            Some(field(path, n, "AP", cols[2])?)
        };
        rows.push(MetricsRow {
            epoch: field(path, n, "epoch", cols[0])?,
            category: cols[1].to_string(),
            ap,
            precision: field(path, n, "precision", cols[3])?,
            recall: field(path, n, "recall", cols[4])?,
            frozen_count: field(path, n, "frozen_count", cols[5])?,
            box_ratio: field(path, n, "box_ratio", cols[6])?,
        });
    }
    Ok(rows)
}

pub fn read_run_metrics(run_dir: &Path) -> Result<Vec<MetricsRow>> {
    read_metrics(&run_dir.join(METRICS_FILE))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Final-epoch values per category (and `all`), plus the lowest precision
/// seen over the run.
pub fn summary_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("category,epochs,final_AP,final_precision,final_recall,final_frozen_count,final_box_ratio,min_precision\n");
    let Some(last) = rows.iter().map(|r| r.epoch).max() else {
        return out;
    };
    for r in rows.iter().filter(|r| r.epoch == last) {
        let min_precision = rows
            .iter()
            .filter(|o| o.category == r.category)
            .map(|o| o.precision)
            .fold(f64::INFINITY, f64::min);
        let _ = writeln!(
            out,
            "{},{last},{},{:.6},{:.6},{},{:.6},{:.6}",
            r.category,
            fmt_opt(r.ap),
            r.precision,
            r.recall,
            r.frozen_count,
            r.box_ratio,
            min_precision
        );
    }
    out
}

/// Plain-text table of the final epoch, for the terminal.
pub fn summary_table(rows: &[MetricsRow]) -> String {
    let mut out = String::new();
    let Some(last) = rows.iter().map(|r| r.epoch).max() else {
        out.push_str("no epochs recorded\n");
        return out;
    };
    let _ = writeln!(out, "epoch {last}");
    let _ = writeln!(out, "{:<12} {:>8} {:>9} {:>8} {:>7} {:>9}", "category", "AP", "precision", "recall", "frozen", "box_ratio");
    for r in rows.iter().filter(|r| r.epoch == last) {
        let ap = r.ap.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>9.4} {:>8.4} {:>7} {:>9.4}",
            r.category, ap, r.precision, r.recall, r.frozen_count, r.box_ratio
        );
    }
    out
}

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    points: Vec<(f64, f64)>,
}

const PANEL_W: f64 = 300.0;
const PANEL_H: f64 = 200.0;
const MARGIN: f64 = 40.0;

fn panel(out: &mut String, x0: f64, title: &str, series: &[Series], x_max: f64, y_max: f64) {
    let sx = |x: f64| x0 + MARGIN + x / x_max.max(1.0) * (PANEL_W - 2.0 * MARGIN);
    let sy = |y: f64| PANEL_H - MARGIN + 10.0 - y / y_max * (PANEL_H - 2.0 * MARGIN);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="20" font-size="13" text-anchor="middle">{title}</text>"#,
        x0 + PANEL_W / 2.0
    );
    let _ = writeln!(
        out,
        r##"<polyline fill="none" stroke="#444" points="{:.1},{:.1} {:.1},{:.1} {:.1},{:.1}"/>"##,
        sx(0.0),
        sy(y_max),
        sx(0.0),
        sy(0.0),
        sx(x_max),
        sy(0.0)
    );
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{y_max:.3}</text>"#, sx(0.0) - 4.0, sy(y_max) + 4.0);
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">0</text>"#, sx(0.0) - 4.0, sy(0.0) + 4.0);
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">epoch {x_max:.0}</text>"#, sx(x_max), sy(0.0) + 16.0);
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#, s.color, pts.join(" "));
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" fill="{}">{}</text>"#,
            x0 + MARGIN + 8.0,
            40.0 + 12.0 * i as f64,
            s.color,
            s.label
        );
    }
}

/// Three panels from the `all` rows: mAP, precision/recall and frozen count
/// against epoch.
pub fn render_svg(rows: &[MetricsRow]) -> String {
    let all: Vec<&MetricsRow> = rows.iter().filter(|r| r.category == "all").collect();
    let x_max = all.iter().map(|r| r.epoch).max().unwrap_or(0) as f64;
    let map = Series {
        label: "mAP@0.5",
        color: "#1f77b4",
        points: all.iter().filter_map(|r| r.ap.map(|a| (r.epoch as f64, a))).collect(),
    };
    let precision = Series {
        label: "precision",
        color: "#2ca02c",
        points: all.iter().map(|r| (r.epoch as f64, r.precision)).collect(),
    };
    let recall = Series {
        label: "recall",
        color: "#d62728",
        points: all.iter().map(|r| (r.epoch as f64, r.recall)).collect(),
    };
    let frozen_max = all.iter().map(|r| r.frozen_count).max().unwrap_or(0).max(1) as f64;
    let frozen = Series {
        label: "frozen labels",
        color: "#9467bd",
        points: all.iter().map(|r| (r.epoch as f64, r.frozen_count as f64)).collect(),
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" font-family="sans-serif">"#,
        3.0 * PANEL_W,
        PANEL_H
    );
    let map_max = map.points.iter().map(|p| p.1).fold(0.0, f64::max).max(1e-3);
    panel(&mut out, 0.0, "mAP@0.5", &[map], x_max, map_max);
    panel(&mut out, PANEL_W, "pseudo-label precision / recall", &[precision, recall], x_max, 1.0);
    panel(&mut out, 2.0 * PANEL_W, "frozen pseudo labels", &[frozen], x_max, frozen_max);
    out.push_str("</svg>\n");
    out
}

/// Writes `report.svg` and `summary.csv` into the run directory.
pub fn write_report(run_dir: &Path) -> Result<Vec<MetricsRow>> {
    let rows = read_run_metrics(run_dir)?;
    crate::io::write_bytes(&run_dir.join(REPORT_FILE), render_svg(&rows).as_bytes())?;
    crate::io::write_bytes(&run_dir.join(SUMMARY_FILE), summary_csv(&rows).as_bytes())?;
    Ok(rows)
}
