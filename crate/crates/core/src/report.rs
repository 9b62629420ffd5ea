//! Metric and loss tables (CSV) and line plots (SVG).
//!
//! Values are written with Rust's shortest round-trip float formatting, so a
//! table parsed back and re-written is byte-identical.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{LabError, Result};
use crate::eval::MetricRecord;

pub const METRICS_HEADER: &str = "run_id,metric,concept,t_star,value,n,seed";
pub const LOSSES_HEADER: &str = "run_id,stage,step,loss";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub record: MetricRecord,
}

impl MetricRow {
    fn key(&self) -> (&str, Option<usize>, Option<usize>) {
        (&self.record.name, self.record.concept, self.record.t_star)
    }
}

fn opt(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(field: &str, line: usize) -> Result<Option<usize>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|e| LabError::Parse(format!("metrics line {line}: {e}")))
}

fn parse_field<T: std::str::FromStr>(field: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    field
        .parse()
        .map_err(|e| LabError::Parse(format!("line {line}: `{field}`: {e}")))
}

/// Rows of `metrics.csv`, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
}

impl MetricsTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == METRICS_HEADER => {}
            _ => return Err(LabError::Parse(format!("metrics header must be `{METRICS_HEADER}`"))),
        }
        let mut rows = Vec::new();
        for (i, line) in lines.filter(|(_, l)| !l.is_empty()) {
            let n = i + 1;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(LabError::Parse(format!("metrics line {n}: expected 7 fields")));
            }
            rows.push(MetricRow {
                run_id: f[0].to_string(),
                record: MetricRecord {
                    name: f[1].to_string(),
                    concept: parse_opt(f[2], n)?,
                    t_star: parse_opt(f[3], n)?,
                    value: parse_field(f[4], n)?,
                    count: parse_field(f[5], n)?,
                    seed: parse_field(f[6], n)?,
                },
            });
        }
        Ok(MetricsTable { rows })
    }

    pub fn load_or_default(path: &Path) -> Result<Self> {
        if path.exists() {
            Self::parse(&std::fs::read_to_string(path)?)
        } else {
            Ok(Self::default())
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            let m = &r.record;
            let _ = writeln!(
                out,
                "{},{},{},{},{:?},{},{}",
                r.run_id,
                m.name,
                opt(m.concept),
                opt(m.t_star),
                m.value,
                m.count,
                m.seed
            );
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }

    /// Insert records, replacing any existing row with the same
    /// `(metric, concept, t_star)` in place. New keys are appended.
    pub fn upsert(&mut self, run_id: &str, records: &[MetricRecord]) {
        for rec in records {
            let row = MetricRow {
                run_id: run_id.to_string(),
                record: rec.clone(),
            };
            match self.rows.iter_mut().find(|r| r.key() == row.key()) {
                Some(slot) => *slot = row,
                None => self.rows.push(row),
            }
        }
    }

    pub fn get(&self, metric: &str, concept: Option<usize>, t_star: Option<usize>) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.key() == (metric, concept, t_star))
            .map(|r| r.record.value)
    }

    /// Rows of one metric, in file order.
    pub fn series(&self, metric: &str) -> Vec<&MetricRecord> {
        self.rows.iter().map(|r| &r.record).filter(|m| m.name == metric).collect()
    }
}

/// Per-step training losses, one block of rows per stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTable {
    pub rows: Vec<(String, String, usize, f64)>,
}

impl LossTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == LOSSES_HEADER => {}
            _ => return Err(LabError::Parse(format!("losses header must be `{LOSSES_HEADER}`"))),
        }
        let mut rows = Vec::new();
        for (i, line) in lines.filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(LabError::Parse(format!("losses line {}: expected 4 fields", i + 1)));
            }
            rows.push((f[0].to_string(), f[1].to_string(), parse_field(f[2], i + 1)?, parse_field(f[3], i + 1)?));
        }
        Ok(LossTable { rows })
    }

    pub fn load_or_default(path: &Path) -> Result<Self> {
        if path.exists() {
            Self::parse(&std::fs::read_to_string(path)?)
        } else {
            Ok(Self::default())
        }
    }

    /// Replace every row of `stage` with `losses`.
    pub fn replace_stage(&mut self, run_id: &str, stage: &str, losses: &[f64]) {
        self.rows.retain(|r| r.1 != stage);
        self.rows
            .extend(losses.iter().enumerate().map(|(i, &l)| (run_id.to_string(), stage.to_string(), i, l)));
    }

    pub fn stages(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.1) {
                out.push(r.1.clone());
            }
        }
        out
    }

    pub fn stage(&self, stage: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.1 == stage).map(|r| r.3).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{LOSSES_HEADER}\n");
        for (id, stage, step, loss) in &self.rows {
            let _ = writeln!(out, "{id},{stage},{step},{loss:?}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }
}

/// One named polyline.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    (x0, x1, y0, y1)
}

/// A small SVG line chart. `digest` is embedded as a comment and in the caption.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series], digest: &str) -> String {
    let (w, h, pad) = (640.0, 400.0, 56.0);
    let (x0, x1, y0, y1) = bounds(series);
    let px = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let py = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, "<!-- config digest {digest} -->");
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    // axes
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {t} L{pad} {b} L{r} {b}" stroke="black" fill="none"/>"#,
        t = pad,
        b = h - pad,
        r = w - pad
    );
    for i in 0..=4 {
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
            pad - 6.0,
            py(fy) + 4.0,
            tick(fy)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            px(fx),
            h - pad + 16.0,
            tick(fx)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        w / 2.0,
        h - 18.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .enumerate()
            .map(|(j, &(x, y))| format!("{}{:.2} {:.2}", if j == 0 { "M" } else { "L" }, px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<path d="{}" stroke="{color}" stroke-width="2" fill="none"/>"#,
            path.join(" ")
        );
        for &(x, y) in &ser.points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
            w - pad - 110.0,
            pad + 16.0 * i as f64,
            escape(&ser.label)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="monospace" font-size="9" text-anchor="end" fill="gray">config {}</text>"#,
        w - 4.0,
        h - 4.0,
        &digest[..digest.len().min(16)]
    );
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
