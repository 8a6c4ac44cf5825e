//! Static figures: SVG line plots and PNG heatmaps. The SVG is written by
//! hand, so no font stack is needed.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{LabError, LabResult};

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
        }
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn nice_ticks(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let raw = (hi - lo) / count as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(t);
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Renders one or more series on shared axes. With `log_y` the y values are
/// plotted as `log10`; non-positive and non-finite points are dropped.
pub fn line_plot_svg(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series], log_y: bool) -> LabResult<()> {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (80.0, 170.0, 40.0, 60.0);
    let tf = |y: f64| if log_y { y.log10() } else { y };
    let pts: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_y || *y > 0.0))
                .map(|&(x, y)| (x, tf(y)))
                .collect()
        })
        .collect();
    let all = pts.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        let pad = y0.abs().max(1.0) * 0.05;
        (y0, y1) = (y0 - pad, y1 + pad);
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    for t in nice_ticks(x0, x1, 6) {
        let x = sx(t);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{top}" x2="{x:.1}" y2="{:.1}" stroke="#e5e5e5"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
            top + ph,
            top + ph + 18.0,
            fmt_tick(t)
        );
    }
    for t in nice_ticks(y0, y1, 5) {
        let y = sy(t);
        let label = if log_y { format!("1e{}", fmt_tick(t)) } else { fmt_tick(t) };
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#e5e5e5"/><text x="{:.1}" y="{:.1}" text-anchor="end">{label}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 16.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(20 {}) rotate(-90)" text-anchor="middle">{}{}</text>"#,
        top + ph / 2.0,
        escape(y_label),
        if log_y { " (log10)" } else { "" }
    );
    for (i, (ser, p)) in series.iter().zip(&pts).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !p.is_empty() {
            let coords: Vec<String> = p.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.6" points="{}"/>"#,
                coords.join(" ")
            );
        }
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    std::fs::write(path, s).map_err(|e| LabError::io(path, e))
}

/// Piecewise-linear approximation of the viridis colormap.
fn viridis(t: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let t = t.clamp(0.0, 1.0) * 4.0;
    let i = (t.floor() as usize).min(3);
    let f = t - i as f64;
    let c = |k: usize| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Row-major `rows x cols` grid as a PNG, each cell drawn as a square block
/// so that small grids stay visible. Non-finite cells are grey.
pub fn heatmap_png(path: &Path, rows: usize, cols: usize, values: &[f64]) -> LabResult<()> {
    if rows * cols != values.len() || rows == 0 || cols == 0 {
        return Err(LabError::Format(format!(
            "heatmap needs {rows}x{cols} values, got {}",
            values.len()
        )));
    }
    let finite = values.iter().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = finite.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let cell = (512 / rows.max(cols)).clamp(1, 16) as u32;
    let mut img = RgbImage::new(cols as u32 * cell, rows as u32 * cell);
    for (px, py, p) in img.enumerate_pixels_mut() {
        let v = values[(py / cell) as usize * cols + (px / cell) as usize];
        *p = if v.is_finite() { viridis((v - lo) / span) } else { Rgb([128, 128, 128]) };
    }
    img.save(path)
        .map_err(|e| LabError::Format(format!("{}: {e}", path.display())))
}

/// Line plot of a CSV: first column is x, every other numeric column is a
/// series. Empty cells are skipped.
pub fn plot_csv(csv_path: &Path, out: &Path, log_y: bool) -> LabResult<()> {
    let mut rdr = csv::Reader::from_path(csv_path).map_err(|e| LabError::Format(format!("{}: {e}", csv_path.display())))?;
    let headers = rdr.headers().map_err(|e| LabError::Format(e.to_string()))?.clone();
    if headers.len() < 2 {
        return Err(LabError::Format(format!("{} needs at least two columns", csv_path.display())));
    }
    let mut series: Vec<Series> = headers.iter().skip(1).map(|h| Series::new(h, Vec::new())).collect();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| LabError::Format(e.to_string()))?;
        let Some(Ok(x)) = rec.get(0).map(|v| v.trim().parse::<f64>()) else {
            continue;
        };
        for (s, cell) in series.iter_mut().zip(rec.iter().skip(1)) {
            if let Ok(y) = cell.trim().parse::<f64>() {
                s.points.push((x, y));
            }
        }
    }
    series.retain(|s| !s.points.is_empty());
    let title = csv_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    line_plot_svg(out, &title, &headers[0], "value", &series, log_y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_cover_the_range() {
        let t = nice_ticks(0.0, 1.0, 5);
        assert_eq!(t.first(), Some(&0.0));
        assert!((t.last().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(fmt_tick(0.5), "0.5");
        assert_eq!(fmt_tick(2e-5), "2.0e-5");
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(viridis(0.0), Rgb([68, 1, 84]));
        assert_eq!(viridis(1.0), Rgb([253, 231, 37]));
    }
}
