//! Run-log CSV persistence and static SVG charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::ddpo::{RunLog, StepRecord};
use crate::error::{Error, Result};
use crate::feedback::ClassLabel;

pub const RUNLOG_HEADER: &str = "step,mean_reward,q_ratio,loss,mean_kl,clip_or_rollback_frac,wall_ms";

/// 17 significant digits, enough to round-trip any f64.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn runlog_to_csv(log: &RunLog) -> String {
    let mut out = String::from(RUNLOG_HEADER);
    out.push('\n');
    for r in &log.records {
        let q = r.q.map(num).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step,
            num(r.mean_reward),
            q,
            num(r.loss),
            num(r.mean_kl),
            num(r.clip_or_rollback_frac),
            num(r.wall_ms)
        );
    }
    out
}

pub fn write_runlog_csv(log: &RunLog, path: &Path) -> Result<()> {
    fs::write(path, runlog_to_csv(log)).map_err(|e| Error::io(path, e))
}

pub fn read_runlog_csv(path: &Path) -> Result<RunLog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_runlog_csv(&text, path)
}

pub fn parse_runlog_csv(text: &str, origin: &Path) -> Result<RunLog> {
    let mut lines = text.lines();
    if lines.next() != Some(RUNLOG_HEADER) {
        return Err(Error::format(origin, "missing or unexpected run-log header"));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let bad = |what: &str| Error::format(origin, format!("line {}: {what}", i + 2));
        if fields.len() != 7 {
            return Err(bad("expected 7 fields"));
        }
        let f = |k: usize| fields[k].parse::<f64>().map_err(|_| bad("unparsable number"));
        records.push(StepRecord {
            step: fields[0].parse().map_err(|_| bad("unparsable step"))?,
            mean_reward: f(1)?,
            q: if fields[2].is_empty() { None } else { Some(f(2)?) },
            loss: f(3)?,
            mean_kl: f(4)?,
            clip_or_rollback_frac: f(5)?,
            wall_ms: f(6)?,
        });
    }
    Ok(RunLog { records })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub path: PathBuf,
}

impl PlotSpec {
    pub fn validate(&self) -> Result<()> {
        if self.series.is_empty() {
            return Err(Error::Validation(format!("plot '{}' has no series", self.title)));
        }
        for s in &self.series {
            if s.points.is_empty() {
                return Err(Error::Validation(format!("series '{}' is empty", s.name)));
            }
            if s.points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
                return Err(Error::Validation(format!("series '{}' has non-finite values", s.name)));
            }
        }
        Ok(())
    }
}

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// The drawable rectangle inside the margins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viewport {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

pub const VIEWPORT: Viewport = Viewport {
    left: MARGIN_LEFT,
    top: MARGIN_TOP,
    width: WIDTH - MARGIN_LEFT - MARGIN_RIGHT,
    height: HEIGHT - MARGIN_TOP - MARGIN_BOTTOM,
};

/// Data range of one axis. Tight around the data; a zero-width range is
/// widened symmetrically so the data sits in the middle.
fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if lo < hi {
        (lo, hi)
    } else {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.5 };
        (lo - pad, hi + pad)
    }
}

/// Affine map from data coordinates into the viewport (SVG y grows downward).
#[derive(Debug, Clone, Copy)]
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn map(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let v = VIEWPORT;
        let px = v.left + (x - self.x.0) / (self.x.1 - self.x.0) * v.width;
        let py = v.top + v.height - (y - self.y.0) / (self.y.1 - self.y.0) * v.height;
        (px, py)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn coord(v: f64) -> String {
    format!("{v:.3}")
}

fn open_svg(out: &mut String, title: &str) {
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, frame: &Frame, x_label: &str, y_label: &str) {
    let v = VIEWPORT;
    let (l, t, r, b) = (v.left, v.top, v.left + v.width, v.top + v.height);
    let _ = writeln!(
        out,
        r#"<g class="axes" stroke="black" stroke-width="1"><line x1="{l}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{l}" y1="{t}" x2="{l}" y2="{b}"/></g>"#
    );
    let label = |v: f64| format!("{v:.4e}");
    let _ = writeln!(
        out,
        r#"<g class="ticks" font-family="sans-serif" font-size="11"><text class="x-min" x="{l}" y="{}" text-anchor="start">{}</text><text class="x-max" x="{r}" y="{}" text-anchor="end">{}</text><text class="y-min" x="{}" y="{b}" text-anchor="end">{}</text><text class="y-max" x="{}" y="{}" text-anchor="end">{}</text></g>"#,
        b + 16.0,
        label(frame.x.0),
        b + 16.0,
        label(frame.x.1),
        l - 4.0,
        label(frame.y.0),
        l - 4.0,
        t + 10.0,
        label(frame.y.1)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        l + v.width / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
        t + v.height / 2.0,
        t + v.height / 2.0,
        escape(y_label)
    );
}

/// Line chart of every series over shared axes.
pub fn render_line_chart(spec: &PlotSpec) -> Result<String> {
    spec.validate()?;
    let all = || spec.series.iter().flat_map(|s| s.points.iter().copied());
    let frame = Frame {
        x: axis_range(all().map(|p| p.0)),
        y: axis_range(all().map(|p| p.1)),
    };
    let mut out = String::new();
    open_svg(&mut out, &spec.title);
    axes(&mut out, &frame, &spec.x_label, &spec.y_label);
    for (i, s) in spec.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let name = escape(&s.name);
        if s.points.len() == 1 {
            let (px, py) = frame.map(s.points[0]);
            let _ = writeln!(
                out,
                r#"<circle class="marker" data-series="{name}" cx="{}" cy="{}" r="3" fill="{color}"/>"#,
                coord(px),
                coord(py)
            );
        } else {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&p| {
                    let (px, py) = frame.map(p);
                    format!("{},{}", coord(px), coord(py))
                })
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline class="series" data-series="{name}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                pts.join(" ")
            );
        }
        let ly = VIEWPORT.top + 14.0 * i as f64 + 6.0;
        let lx = VIEWPORT.left + VIEWPORT.width - 120.0;
        let _ = writeln!(
            out,
            r#"<g class="legend-entry"><rect x="{lx}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}" font-family="sans-serif" font-size="11">{name}</text></g>"#,
            ly - 8.0,
            lx + 14.0,
            ly + 1.0
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn label_color(l: ClassLabel) -> &'static str {
    match l {
        ClassLabel::A => "#d62728",
        ClassLabel::B => "#1f77b4",
        ClassLabel::None => "#7f7f7f",
    }
}

/// Scatter plot of 2-d points colored by classifier label.
pub fn render_scatter(points: &[Vec<f64>], labels: &[ClassLabel], title: &str) -> Result<String> {
    if points.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} points but {} labels",
            points.len(),
            labels.len()
        )));
    }
    if let Some(p) = points.iter().find(|p| p.len() != 2) {
        return Err(Error::Shape(format!(
            "scatter plots need 2-dimensional points, got {}",
            p.len()
        )));
    }
    let frame = if points.is_empty() {
        Frame {
            x: (-1.0, 1.0),
            y: (-1.0, 1.0),
        }
    } else {
        Frame {
            x: axis_range(points.iter().map(|p| p[0])),
            y: axis_range(points.iter().map(|p| p[1])),
        }
    };
    let mut out = String::new();
    open_svg(&mut out, title);
    axes(&mut out, &frame, "x_1", "x_2");
    out.push_str("<g class=\"points\">\n");
    for (p, l) in points.iter().zip(labels) {
        let (px, py) = frame.map((p[0], p[1]));
        let _ = writeln!(
            out,
            r#"<circle class="marker" data-label="{l}" cx="{}" cy="{}" r="2.5" fill="{}" fill-opacity="0.7"/>"#,
            coord(px),
            coord(py),
            label_color(*l)
        );
    }
    out.push_str("</g>\n");
    let mut row = 0;
    for l in [ClassLabel::A, ClassLabel::B, ClassLabel::None] {
        let n = labels.iter().filter(|x| **x == l).count();
        if n == 0 {
            continue;
        }
        let y = VIEWPORT.top + 14.0 * row as f64 + 6.0;
        let x = VIEWPORT.left + VIEWPORT.width - 110.0;
        let _ = writeln!(
            out,
            r#"<g class="legend-entry" data-label="{l}"><rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}" font-family="sans-serif" font-size="11">{l} ({n})</text></g>"#,
            y - 8.0,
            label_color(l),
            x + 14.0,
            y + 1.0
        );
        row += 1;
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn write_svg(svg: &str, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// `run_<seed>/step_<k>_<kind>.svg` under `root`.
pub fn chart_path(root: &Path, seed: u64, step: usize, kind: &str) -> PathBuf {
    root.join(format!("run_{seed}")).join(format!("step_{step}_{kind}.svg"))
}
