//! Result tables and minimal SVG line charts.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use crisp_core::BoundReport;

pub const RESULTS_HEADER_EXTRA: &str = "basis_dim,task,ci_lo,ci_hi,ci_lo_corrected,ci_hi_corrected,gic";

/// Inference columns appended to a report row; empty when not computed.
#[derive(Debug, Clone, Copy, Default)]
pub struct Inference {
    pub ci: Option<(f64, f64)>,
    pub ci_corrected: Option<(f64, f64)>,
    pub gic: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ResultRow {
    pub report_row: String,
    pub basis_dim: usize,
    pub task: usize,
    pub inference: Inference,
}

impl ResultRow {
    pub fn new(r: &BoundReport, basis_dim: usize, task: usize, inference: Inference) -> Self {
        Self { report_row: r.csv_row(), basis_dim, task, inference }
    }

    fn line(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.10}")).unwrap_or_default();
        let i = &self.inference;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.report_row,
            self.basis_dim,
            self.task,
            f(i.ci.map(|c| c.0)),
            f(i.ci.map(|c| c.1)),
            f(i.ci_corrected.map(|c| c.0)),
            f(i.ci_corrected.map(|c| c.1)),
            f(i.gic)
        )
    }
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> io::Result<()> {
    let mut s = format!("{},{}\n", BoundReport::CSV_HEADER, RESULTS_HEADER_EXTRA);
    for r in rows {
        s.push_str(&r.line());
        s.push('\n');
    }
    std::fs::write(path, s)
}

/// A plain table: header plus pre-formatted rows.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        std::fs::write(path, s)
    }
}

pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.10}")
    } else {
        String::new()
    }
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
    /// Palette index; paired lines share one.
    pub color: usize,
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn nice_ticks(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let raw = (hi - lo) / count as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(t);
        t += step;
    }
    out
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart with axes, ticks and a legend. `log_x` plots against log2(x).
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series], log_x: bool) -> String {
    let (w, h) = (720.0, 440.0);
    let (ml, mr, mt, mb) = (70.0, 190.0, 40.0, 50.0);
    let tx = |x: f64| if log_x { x.log2() } else { x };
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|&(x, y)| (tx(x), y)))
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if pts.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0).max(1e-9);
    y0 -= pad;
    y1 += pad;
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let sy = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, (ml + w - mr) / 2.0, esc(title));
    let _ = writeln!(
        s,
        r#"<path d="M{ml} {mt} L{ml} {} L{} {}" fill="none" stroke="black"/>"#,
        h - mb,
        w - mr,
        h - mb
    );
    for t in nice_ticks(x0, x1, 6) {
        let label = if log_x { format!("{}", 2f64.powf(t)) } else { format!("{t}") };
        let _ = writeln!(s, r#"<line x1="{0:.2}" y1="{1}" x2="{0:.2}" y2="{2}" stroke="black"/>"#, sx(t), h - mb, h - mb + 5.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#, sx(t), h - mb + 18.0, short(&label));
    }
    for t in nice_ticks(y0, y1, 6) {
        let _ = writeln!(s, r#"<line x1="{}" y1="{1:.2}" x2="{ml}" y2="{1:.2}" stroke="black"/>"#, ml - 5.0, sy(t));
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, ml - 8.0, sy(t) + 4.0, short(&format!("{t}")));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (ml + w - mr) / 2.0, h - 12.0, esc(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        (mt + h - mb) / 2.0,
        esc(ylabel)
    );
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[ser.color % PALETTE.len()];
        let dash = if ser.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let mut d = String::new();
        for &(x, y) in &ser.points {
            let (x, y) = (tx(x), y);
            if !(x.is_finite() && y.is_finite()) {
                continue;
            }
            let _ = write!(d, "{}{:.2} {:.2} ", if d.is_empty() { "M" } else { "L" }, sx(x), sy(y));
        }
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.8"{dash}/>"#, d.trim_end());
        let ly = mt + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="{color}" stroke-width="1.8"{dash}/><text x="{3}" y="{4}">{5}</text>"#,
            w - mr + 12.0,
            ly,
            w - mr + 36.0,
            w - mr + 42.0,
            ly + 4.0,
            esc(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn short(label: &str) -> String {
    match label.parse::<f64>() {
        Ok(v) if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e5) => format!("{v:.1e}"),
        Ok(v) => {
            let s = format!("{v:.4}");
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        }
        Err(_) => label.to_string(),
    }
}
