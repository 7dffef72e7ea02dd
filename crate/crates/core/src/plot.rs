//! Dependency-free SVG line charts with byte-stable output.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series {
            label: label.into(),
            points,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Axes {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_log: bool,
    pub y_log: bool,
}

struct Scale {
    lo: f64,
    hi: f64,
    log: bool,
    floor: f64,
}

impl Scale {
    fn fit(values: &[f64], log: bool, axis: &str) -> Scale {
        let floor = if log {
            let min_pos = values.iter().copied().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
            let floor = if min_pos.is_finite() { min_pos / 10.0 } else { 1e-12 };
            let clamped = values.iter().filter(|v| **v <= 0.0).count();
            if clamped > 0 {
                warn!("{clamped} non-positive value(s) on log {axis} axis clamped to {floor:e}");
            }
            floor
        } else {
            0.0
        };
        let t: Vec<f64> = values.iter().map(|&v| Self::raw(v, log, floor)).collect();
        let mut lo = t.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        } else {
            let pad = 0.05 * (hi - lo);
            lo -= pad;
            hi += pad;
        }
        Scale { lo, hi, log, floor }
    }

    fn raw(v: f64, log: bool, floor: f64) -> f64 {
        if log {
            v.max(floor).log10()
        } else {
            v
        }
    }

    fn unit(&self, v: f64) -> f64 {
        (Self::raw(v, self.log, self.floor) - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let (a, b) = (self.lo.ceil() as i32, self.hi.floor() as i32);
            let mut out: Vec<(f64, String)> = (a..=b).map(|e| (10f64.powi(e), format!("1e{e}"))).collect();
            if out.len() < 2 {
                out = (0..5)
                    .map(|i| {
                        let v = 10f64.powf(self.lo + (self.hi - self.lo) * i as f64 / 4.0);
                        (v, format!("{v:.3}"))
                    })
                    .collect();
            }
            out
        } else {
            (0..5)
                .map(|i| {
                    let v = self.lo + (self.hi - self.lo) * i as f64 / 4.0;
                    (v, format!("{v:.4}"))
                })
                .collect()
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders series as an SVG line chart. Non-finite points are skipped; non-positive
/// values on a log axis are clamped to a tenth of the smallest positive value.
pub fn render_svg(series: &[Series], axes: &Axes) -> Result<String> {
    let finite: Vec<Series> = series
        .iter()
        .map(|s| Series::new(s.label.clone(), s.points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect()))
        .collect();
    if finite.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Input("nothing to plot: every series is empty".into()));
    }
    let xs: Vec<f64> = finite.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let ys: Vec<f64> = finite.iter().flat_map(|s| s.points.iter().map(|p| p.1)).collect();
    let sx = Scale::fit(&xs, axes.x_log, "x");
    let sy = Scale::fit(&ys, axes.y_log, "y");
    let pw = WIDTH - MARGIN_L - MARGIN_R;
    let ph = HEIGHT - MARGIN_T - MARGIN_B;
    let px = |x: f64| MARGIN_L + sx.unit(x) * pw;
    let py = |y: f64| MARGIN_T + (1.0 - sy.unit(y)) * ph;

    let mut s = String::new();
    let w = &mut s;
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(w, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        w,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        MARGIN_L + pw / 2.0,
        escape(&axes.title)
    );
    let _ = writeln!(
        w,
        r#"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="black"/>"#
    );
    for (v, label) in sx.ticks() {
        let x = px(v);
        if !(MARGIN_L - 0.01..=MARGIN_L + pw + 0.01).contains(&x) {
            continue;
        }
        let _ = writeln!(
            w,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            MARGIN_T + ph,
            MARGIN_T + ph + 5.0,
            MARGIN_T + ph + 18.0,
            escape(&label)
        );
    }
    for (v, label) in sy.ticks() {
        let y = py(v);
        if !(MARGIN_T - 0.01..=MARGIN_T + ph + 0.01).contains(&y) {
            continue;
        }
        let _ = writeln!(
            w,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{MARGIN_L}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            MARGIN_L - 5.0,
            MARGIN_L - 8.0,
            y + 4.0,
            escape(&label)
        );
    }
    let _ = writeln!(
        w,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        MARGIN_L + pw / 2.0,
        HEIGHT - 12.0,
        escape(&axes.x_label)
    );
    let _ = writeln!(
        w,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        MARGIN_T + ph / 2.0,
        MARGIN_T + ph / 2.0,
        escape(&axes.y_label)
    );
    for (i, series) in finite.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if series.points.len() > 1 {
            let pts: Vec<String> = series.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            let _ = writeln!(
                w,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                pts.join(" ")
            );
        }
        for &(x, y) in &series.points {
            let _ = writeln!(w, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
        let ly = MARGIN_T + 14.0 + 18.0 * i as f64;
        let lx = MARGIN_L + pw + 12.0;
        let _ = writeln!(
            w,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(&series.label)
        );
    }
    let _ = writeln!(w, "</svg>");
    Ok(s)
}

pub fn emit_plot(series: &[Series], axes: &Axes, path: &Path) -> Result<()> {
    let svg = render_svg(series, axes)?;
    crate::io::write_atomic(path, svg.as_bytes())
}
