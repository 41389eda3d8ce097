// SPDX-License-Identifier: MIT OR Apache-2.0

//! Standalone SVG figures: diverging heatmaps for sweep grids and line/marker
//! charts for curves. Output is a pure function of the inputs apart from an
//! optional generation-timestamp comment.

use std::fmt::Write as _;

use thiserror::Error;

use crate::patching::SweepGrid;

#[derive(Debug, Error, PartialEq)]
pub enum PlotError {
    #[error("no series to plot")]
    EmptySeries,
    #[error("series {0:?} has no finite points")]
    NoPoints(String),
    #[error("log-scale x axis needs positive x values (series {series:?} has {x})")]
    NonPositiveLogX { series: String, x: f64 },
    #[error("empty grid")]
    EmptyGrid,
}

/// Cells with `|value|` at or above this get a numeric annotation.
pub const ANNOTATE_THRESHOLD: f32 = 0.1;

const PALETTE: [&str; 6] = ["#1f4e79", "#e4572e", "#2e8b57", "#8e44ad", "#d4a017", "#555555"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn document(width: f64, height: f64, body: &str, timestamp: Option<u64>) -> String {
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    if let Some(t) = timestamp {
        let _ = writeln!(out, "<!-- generated at unix time {t} -->");
    }
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">"
    );
    let _ = writeln!(out, "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>");
    out.push_str(body);
    out.push_str("</svg>\n");
    out
}

// ---------------------------------------------------------------------------
// Heatmap
// ---------------------------------------------------------------------------

/// Blue (negative) → white (0) → red (positive), `t ∈ [−1, 1]`.
pub fn diverging_color(t: f64) -> String {
    let t = t.clamp(-1.0, 1.0);
    let (r, g, b) = if t >= 0.0 {
        (255.0, 255.0 - 175.0 * t, 255.0 - 185.0 * t)
    } else {
        (255.0 + 205.0 * t, 255.0 + 135.0 * t, 255.0 + 35.0 * t)
    };
    format!("#{:02x}{:02x}{:02x}", r.round() as u8, g.round() as u8, b.round() as u8)
}

#[derive(Clone, Debug, Default)]
pub struct HeatmapStyle {
    pub title: String,
    pub row_prefix: String,
    /// Overrides `row_prefix` + index when present.
    pub row_labels: Option<Vec<String>>,
    /// Cells drawn with a gold outline, as `(row, col)`.
    pub highlight: Vec<(usize, usize)>,
}

/// Cell-coloured heatmap centred at 0, symmetric in the largest magnitude.
pub fn plot_heatmap(grid: &SweepGrid, style: &HeatmapStyle, timestamp: Option<u64>) -> Result<String, PlotError> {
    if grid.rows == 0 || grid.cols == 0 {
        return Err(PlotError::EmptyGrid);
    }
    let cell = 44.0;
    let (left, top) = (70.0, 60.0);
    // Wide enough for the title at roughly 9 px per character.
    let title_width = 9.0 * style.title.chars().count() as f64 + 40.0;
    let width = (left + cell * grid.cols as f64 + 20.0).max(title_width);
    let height = top + cell * grid.rows as f64 + 30.0;
    let scale = grid.cells.iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
    let mut body = String::new();
    let _ = writeln!(
        body,
        "<text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{}</text>",
        width / 2.0,
        escape(&style.title)
    );
    for (c, label) in grid.col_labels.iter().enumerate() {
        let _ = writeln!(
            body,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            left + cell * (c as f64 + 0.5),
            top - 8.0,
            escape(label)
        );
    }
    for r in 0..grid.rows {
        let y = top + cell * r as f64;
        let label = match style.row_labels.as_ref().and_then(|l| l.get(r)) {
            Some(l) => l.clone(),
            None => format!("{}{r}", style.row_prefix),
        };
        let _ = writeln!(
            body,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{}</text>",
            left - 6.0,
            y + cell / 2.0 + 4.0,
            escape(&label)
        );
        for c in 0..grid.cols {
            let v = grid.get(r, c);
            let t = if scale > 0.0 { v as f64 / scale } else { 0.0 };
            let x = left + cell * c as f64;
            let _ = writeln!(
                body,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cell}\" height=\"{cell}\" fill=\"{}\" stroke=\"#dddddd\"/>",
                diverging_color(t)
            );
            if v.abs() >= ANNOTATE_THRESHOLD {
                let _ = writeln!(
                    body,
                    "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{v:+.2}</text>",
                    x + cell / 2.0,
                    y + cell / 2.0 + 4.0
                );
            }
        }
    }
    for &(r, c) in &style.highlight {
        if r < grid.rows && c < grid.cols {
            let _ = writeln!(
                body,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{cell}\" height=\"{cell}\" fill=\"none\" stroke=\"#d4a017\" stroke-width=\"3\"/>",
                left + cell * c as f64,
                top + cell * r as f64
            );
        }
    }
    Ok(document(width, height, &body, timestamp))
}

// ---------------------------------------------------------------------------
// Curves
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SeriesStyle {
    #[default]
    Line,
    Markers,
}

#[derive(Clone, Debug, Default)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub style: SeriesStyle,
}

#[derive(Clone, Debug, Default)]
pub struct Axes {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    /// Horizontal reference rules, `(y, label)`.
    pub hlines: Vec<(f64, String)>,
    /// Star markers, `(x, y, label)`.
    pub stars: Vec<(f64, f64, String)>,
}

/// Line chart with legend; markers-only series draw a scatter.
pub fn plot_curves(series: &[Series], axes: &Axes, timestamp: Option<u64>) -> Result<String, PlotError> {
    if series.is_empty() {
        return Err(PlotError::EmptySeries);
    }
    for s in series {
        if !s.points.iter().any(|(x, y)| x.is_finite() && y.is_finite()) {
            return Err(PlotError::NoPoints(s.label.clone()));
        }
        if axes.log_x {
            if let Some(&(x, _)) = s.points.iter().find(|p| p.0 <= 0.0) {
                return Err(PlotError::NonPositiveLogX { series: s.label.clone(), x });
            }
        }
    }
    let fx = |x: f64| if axes.log_x { x.log10() } else { x };
    let finite = || series.iter().flat_map(|s| &s.points).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1) = finite().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(fx(p.0)), b.max(fx(p.0))));
    let ys = finite().map(|p| p.1).chain(axes.hlines.iter().map(|h| h.0)).chain(axes.stars.iter().map(|s| s.1));
    let (mut y0, mut y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    if x1 - x0 <= 0.0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 <= 0.0 {
        let pad = if y0 == 0.0 { 1.0 } else { y0.abs() * 0.1 };
        y0 -= pad;
        y1 += pad;
    } else {
        let pad = (y1 - y0) * 0.05;
        y0 -= pad;
        y1 += pad;
    }
    let (width, height) = (720.0, 440.0);
    let (left, right, top, bottom) = (70.0, 190.0, 40.0, 50.0);
    let pw = width - left - right;
    let ph = height - top - bottom;
    let sx = |x: f64| left + (fx(x) - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (y1 - y) / (y1 - y0) * ph;

    let mut body = String::new();
    let _ = writeln!(
        body,
        "<text x=\"{:.1}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{}</text>",
        left + pw / 2.0,
        escape(&axes.title)
    );
    let _ = writeln!(
        body,
        "<rect x=\"{left}\" y=\"{top}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#333333\"/>"
    );
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        let py = sy(y);
        let _ = writeln!(
            body,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">{}</text>",
            left - 5.0,
            py + 3.0,
            tick(y)
        );
        let xv = x0 + (x1 - x0) * i as f64 / 4.0;
        let label = if axes.log_x { 10f64.powf(xv) } else { xv };
        let _ = writeln!(
            body,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
            left + pw * i as f64 / 4.0,
            top + ph + 15.0,
            tick(label)
        );
    }
    let _ = writeln!(
        body,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{}{}</text>",
        left + pw / 2.0,
        height - 12.0,
        escape(&axes.x_label),
        if axes.log_x { " (log scale)" } else { "" }
    );
    let _ = writeln!(
        body,
        "<text x=\"16\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>",
        top + ph / 2.0,
        top + ph / 2.0,
        escape(&axes.y_label)
    );
    for (y, label) in &axes.hlines {
        let py = sy(*y);
        let _ = writeln!(
            body,
            "<line x1=\"{left}\" y1=\"{py:.1}\" x2=\"{:.1}\" y2=\"{py:.1}\" stroke=\"#999999\" stroke-dasharray=\"6 4\"/>",
            left + pw
        );
        let _ = writeln!(
            body,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">{}</text>",
            left + pw - 4.0,
            py - 4.0,
            escape(label)
        );
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| (sx(x), sy(y)))
            .collect();
        match s.style {
            SeriesStyle::Line => {
                let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
                let _ = writeln!(
                    body,
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
                    path.join(" ")
                );
            }
            SeriesStyle::Markers => {
                for (x, y) in &pts {
                    let _ = writeln!(body, "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"4\" fill=\"{color}\"/>");
                }
            }
        }
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            body,
            "<rect x=\"{lx:.1}\" y=\"{:.1}\" width=\"14\" height=\"4\" fill=\"{color}\"/>",
            ly - 4.0
        );
        let _ = writeln!(
            body,
            "<text x=\"{:.1}\" y=\"{ly:.1}\" font-size=\"11\">{}</text>",
            lx + 20.0,
            escape(&s.label)
        );
    }
    for (x, y, label) in &axes.stars {
        let (cx, cy) = (sx(*x), sy(*y));
        let star: Vec<String> = (0..10)
            .map(|k| {
                let r = if k % 2 == 0 { 9.0 } else { 4.0 };
                let a = std::f64::consts::PI * (k as f64 / 5.0 - 0.5);
                format!("{:.1},{:.1}", cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        let _ = writeln!(
            body,
            "<polygon points=\"{}\" fill=\"#d4a017\" stroke=\"#7a5c00\"/>",
            star.join(" ")
        );
        let _ = writeln!(
            body,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\">{}</text>",
            cx + 10.0,
            cy - 8.0,
            escape(label)
        );
    }
    Ok(document(width, height, &body, timestamp))
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::GridKind;

    fn grid(rows: usize, cols: usize, cells: Vec<f32>) -> SweepGrid {
        SweepGrid {
            kind: GridKind::Head,
            rows,
            cols,
            col_labels: (0..cols).map(|c| format!("H{c}")).collect(),
            cells,
            n_pairs: 1,
            n_degenerate: 0,
        }
    }

    #[test]
    fn heatmap_draws_one_cell_per_entry() {
        let mut cells = vec![0.0; 144];
        cells[9 * 12 + 9] = 1.02;
        let svg = plot_heatmap(&grid(12, 12, cells), &HeatmapStyle::default(), None).unwrap();
        assert_eq!(svg.matches("stroke=\"#dddddd\"").count(), 144);
        assert!(svg.contains(">+1.02<"));
        assert!(!svg.contains("<!--"));
    }

    #[test]
    fn all_zero_grid_is_uniform_midpoint() {
        let svg = plot_heatmap(&grid(2, 2, vec![0.0; 4]), &HeatmapStyle::default(), Some(5)).unwrap();
        assert_eq!(svg.matches("fill=\"#ffffff\" stroke=\"#dddddd\"").count(), 4);
        assert!(svg.contains("<!-- generated at unix time 5 -->"));
        let one = plot_heatmap(&grid(1, 1, vec![0.5]), &HeatmapStyle::default(), None).unwrap();
        assert!(one.contains(">H0<") && one.contains(">+0.50<"));
        assert_eq!(plot_heatmap(&grid(0, 0, vec![]), &HeatmapStyle::default(), None), Err(PlotError::EmptyGrid));
    }

    #[test]
    fn palette_is_centered() {
        assert_eq!(diverging_color(0.0), "#ffffff");
        assert_ne!(diverging_color(1.0), diverging_color(-1.0));
    }

    #[test]
    fn curves_validate_input() {
        assert_eq!(plot_curves(&[], &Axes::default(), None), Err(PlotError::EmptySeries));
        let flat = Series { label: "c".into(), points: vec![(0.0, 2.0), (1.0, 2.0)], style: SeriesStyle::Line };
        let svg = plot_curves(std::slice::from_ref(&flat), &Axes::default(), None).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        let log = Axes { log_x: true, ..Default::default() };
        assert!(matches!(plot_curves(&[flat], &log, None), Err(PlotError::NonPositiveLogX { .. })));
    }
}
