use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::{ComparisonReport, RunSummary, SimLog, TickRecord};

pub const TRACE_COLUMNS: [&str; 22] = [
    "t",
    "p",
    "p_dot",
    "f_c_true",
    "f_c_est",
    "f_lower",
    "f_upper",
    "h_r",
    "robust_h",
    "u_nominal",
    "u_safe",
    "d",
    "theta_hat_1",
    "theta_hat_2",
    "vartheta_1",
    "vartheta_2",
    "box_lower_1",
    "box_lower_2",
    "box_upper_1",
    "box_upper_2",
    "infeasible_flag",
    "mrr_true",
];

pub fn trace_header() -> String {
    TRACE_COLUMNS.join(",")
}

fn fmt_float(v: f64) -> String {
    format!("{v:.8e}")
}

fn record_fields(r: &TickRecord) -> [f64; 22] {
    [
        r.t,
        r.p,
        r.p_dot,
        r.f_c_true,
        r.f_c_est,
        r.f_lower,
        r.f_upper,
        r.h_r,
        r.robust_h,
        r.u_nominal,
        r.u_safe,
        r.d,
        r.theta_hat[0],
        r.theta_hat[1],
        r.vartheta[0],
        r.vartheta[1],
        r.box_lower[0],
        r.box_lower[1],
        r.box_upper[0],
        r.box_upper[1],
        if r.infeasible { 1.0 } else { 0.0 },
        r.mrr_true,
    ]
}

pub fn write_trace<W: Write>(records: &[TickRecord], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{}", trace_header())?;
    let mut line = String::with_capacity(400);
    for r in records {
        line.clear();
        for (i, v) in record_fields(r).iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            if i == 20 {
                line.push_str(if r.infeasible { "1" } else { "0" });
            } else {
                line.push_str(&fmt_float(*v));
            }
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Reads a trace back into records.
pub fn parse_trace(text: &str) -> Result<Vec<TickRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(trace_header().as_str()) {
        return Err(Error::invalid("trace header does not match"));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let v: Vec<f64> = line
                .split(',')
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::invalid(format!("trace line {}: {e}", n + 2)))?;
            if v.len() != TRACE_COLUMNS.len() {
                return Err(Error::invalid(format!("trace line {} has {} fields", n + 2, v.len())));
            }
            Ok(TickRecord {
                t: v[0],
                p: v[1],
                p_dot: v[2],
                f_c_true: v[3],
                f_c_est: v[4],
                f_lower: v[5],
                f_upper: v[6],
                h_r: v[7],
                robust_h: v[8],
                u_nominal: v[9],
                u_safe: v[10],
                d: v[11],
                theta_hat: [v[12], v[13]],
                vartheta: [v[14], v[15]],
                box_lower: [v[16], v[17]],
                box_upper: [v[18], v[19]],
                infeasible: v[20] != 0.0,
                mrr_true: v[21],
            })
        })
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: PathBuf, contents: &str) -> Result<PathBuf> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn write_trace_file(dir: &Path, log: &SimLog) -> Result<PathBuf> {
    let path = dir.join(format!("trace_{}.csv", log.mode.name()));
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    write_trace(&log.records, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes the trace, `summary.json` and the three figures for one run.
pub fn emit_outputs(log: &SimLog, summary: &RunSummary, out_dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out_dir)?;
    let mut written = vec![write_trace_file(out_dir, log)?];
    let json = serde_json::to_string_pretty(summary).expect("summary serialises");
    written.push(write_file(out_dir.join("summary.json"), &json)?);
    written.extend(write_figures(&[log], out_dir)?);
    Ok(written)
}

/// Writes every trace, a combined `summary.json` and overlaid figures.
pub fn emit_comparison(logs: &[&SimLog], report: &ComparisonReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out_dir)?;
    let mut written = Vec::new();
    for log in logs {
        written.push(write_trace_file(out_dir, log)?);
    }
    let json = serde_json::to_string_pretty(report).expect("report serialises");
    written.push(write_file(out_dir.join("summary.json"), &json)?);
    written.extend(write_figures(logs, out_dir)?);
    Ok(written)
}

fn write_figures(logs: &[&SimLog], dir: &Path) -> Result<Vec<PathBuf>> {
    const COLORS: [&str; 3] = ["#d62728", "#1f77b4", "#2ca02c"];
    let mut force = Plot::new("Contact force", "t [s]", "force [N]");
    let mut h = Plot::new("Barrier value (true force)", "t [s]", "h");
    let mut mrr = Plot::new("Material removal rate", "t [s]", "MRR");
    if let Some(first) = logs.first() {
        let t: Vec<f64> = first.records.iter().map(|r| r.t).collect();
        force.series("f_lower", "#555555", true, &t, first.records.iter().map(|r| r.f_lower));
        force.series("f_upper", "#555555", true, &t, first.records.iter().map(|r| r.f_upper));
        h.series("h = 0", "#555555", true, &t, t.iter().map(|_| 0.0));
    }
    for (log, color) in logs.iter().zip(COLORS.iter().cycle()) {
        let t: Vec<f64> = log.records.iter().map(|r| r.t).collect();
        let name = log.mode.name();
        force.series(name, color, false, &t, log.records.iter().map(|r| r.f_c_true));
        let start = log.activation.unwrap_or(log.records.len());
        h.series(name, color, false, &t[start..], log.records[start..].iter().map(|r| r.h_true()));
        mrr.series(name, color, false, &t, log.records.iter().map(|r| r.mrr_true));
    }
    Ok(vec![
        write_file(dir.join("fig_force.svg"), &force.render())?,
        write_file(dir.join("fig_h.svg"), &h.render())?,
        write_file(dir.join("fig_mrr.svg"), &mrr.render())?,
    ])
}

struct Series {
    name: String,
    color: String,
    dashed: bool,
    points: Vec<(f64, f64)>,
}

struct Plot {
    title: String,
    xlabel: String,
    ylabel: String,
    series: Vec<Series>,
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 20.0, 40.0, 50.0); // left, right, top, bottom
const MAX_POINTS: usize = 2000;

impl Plot {
    fn new(title: &str, xlabel: &str, ylabel: &str) -> Self {
        Plot {
            title: title.into(),
            xlabel: xlabel.into(),
            ylabel: ylabel.into(),
            series: Vec::new(),
        }
    }

    fn series(&mut self, name: &str, color: &str, dashed: bool, t: &[f64], y: impl Iterator<Item = f64>) {
        let all: Vec<(f64, f64)> = t.iter().copied().zip(y).filter(|(a, b)| a.is_finite() && b.is_finite()).collect();
        let stride = all.len().div_ceil(MAX_POINTS).max(1);
        let mut points: Vec<(f64, f64)> = all.iter().step_by(stride).copied().collect();
        if let Some(last) = all.last() {
            if points.last() != Some(last) {
                points.push(*last);
            }
        }
        self.series.push(Series {
            name: name.into(),
            color: color.into(),
            dashed,
            points,
        });
    }

    fn render(&self) -> String {
        let pts = self.series.iter().flat_map(|s| s.points.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in pts {
            x0 = x0.min(*x);
            x1 = x1.max(*x);
            y0 = y0.min(*y);
            y1 = y1.max(*y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= y0 {
            let pad = y0.abs().max(1.0) * 0.05;
            y0 -= pad;
            y1 += pad;
        }
        let (l, r, top, bottom) = MARGIN;
        let pw = WIDTH - l - r;
        let ph = HEIGHT - top - bottom;
        let sx = |x: f64| l + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| top + (y1 - y) / (y1 - y0) * ph;

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
        );
        let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{l}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333333"/>"##
        );
        for k in 0..=4 {
            let fx = x0 + (x1 - x0) * k as f64 / 4.0;
            let fy = y0 + (y1 - y0) * k as f64 / 4.0;
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
                sx(fx),
                top + ph + 16.0,
                tick_label(fx)
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
                l - 6.0,
                sy(fy) + 4.0,
                tick_label(fy)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
            l + pw / 2.0,
            HEIGHT - 10.0,
            escape(&self.xlabel)
        );
        let _ = writeln!(
            svg,
            r#"<text x="14" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
            top + ph / 2.0,
            top + ph / 2.0,
            escape(&self.ylabel)
        );
        for (i, s) in self.series.iter().enumerate() {
            if s.points.is_empty() {
                continue;
            }
            let mut path = String::new();
            for (j, (x, y)) in s.points.iter().enumerate() {
                let _ = write!(path, "{}{:.2},{:.2}", if j == 0 { "" } else { " " }, sx(*x), sy(*y));
            }
            let dash = if s.dashed { r#" stroke-dasharray="6 4""# } else { "" };
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.2"{dash} points="{path}"/>"#,
                escape(&s.color)
            );
            let ly = top + 14.0 + 14.0 * i as f64;
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{ly:.1}" font-family="sans-serif" font-size="11" fill="{}" text-anchor="end">{}</text>"#,
                l + pw - 6.0,
                escape(&s.color),
                escape(&s.name)
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
