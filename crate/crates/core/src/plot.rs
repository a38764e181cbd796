//! Minimal SVG scatter plots: one panel per scene, predicted score vs
//! label, with a least-squares fit line per panel. No plotting crate is
//! pulled in because the output is a fixed, small diagnostic figure and
//! hand-writing the SVG keeps it byte-deterministic.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ScenePanel {
    pub scene: String,
    /// (label, predicted score) per method.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct PlotSummary {
    /// Ordinary least-squares slope of score on label, per scene.
    pub slopes: Vec<(String, f64)>,
    pub positive_slopes: usize,
}

const PANEL_W: f64 = 220.0;
const PANEL_H: f64 = 180.0;
const MARGIN: f64 = 34.0;
const TITLE_H: f64 = 30.0;

/// OLS slope of y on x; `None` when x is degenerate (< 2 distinct values).
pub fn ols_slope(points: &[(f64, f64)]) -> Option<f64> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    Some(sxy / sxx)
}

fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        // Degenerate span: pad so the point sits mid-panel.
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.08;
    (lo - pad, hi + pad)
}

/// Render a grid of per-scene scatter panels to `path` and return the
/// per-scene fit slopes. The figure title reports how many scenes have a
/// positive slope.
pub fn scatter_grid(panels: &[ScenePanel], title_prefix: &str, path: &Path) -> Result<PlotSummary> {
    if panels.is_empty() {
        return Err(Error::Eval("no panels to plot".to_string()));
    }
    let cols = (panels.len() as f64).sqrt().ceil() as usize;
    let rows = panels.len().div_ceil(cols);
    let width = cols as f64 * (PANEL_W + MARGIN) + MARGIN;
    let height = TITLE_H + rows as f64 * (PANEL_H + MARGIN) + MARGIN;

    let mut slopes = Vec::with_capacity(panels.len());
    let mut positive = 0usize;
    let mut body = String::new();
    for (i, panel) in panels.iter().enumerate() {
        let col = i % cols;
        let row = i / cols;
        let x0 = MARGIN + col as f64 * (PANEL_W + MARGIN);
        let y0 = TITLE_H + MARGIN + row as f64 * (PANEL_H + MARGIN);
        let (lo_x, hi_x) = axis_range(panel.points.iter().map(|p| p.0));
        let (lo_y, hi_y) = axis_range(panel.points.iter().map(|p| p.1));
        let px = |x: f64| x0 + (x - lo_x) / (hi_x - lo_x) * PANEL_W;
        let py = |y: f64| y0 + PANEL_H - (y - lo_y) / (hi_y - lo_y) * PANEL_H;

        let slope = ols_slope(&panel.points);
        if slope.is_some_and(|s| s > 0.0) {
            positive += 1;
        }
        slopes.push((panel.scene.clone(), slope.unwrap_or(0.0)));

        let _ = write!(
            body,
            "<rect x=\"{x0}\" y=\"{y0}\" width=\"{PANEL_W}\" height=\"{PANEL_H}\" \
             fill=\"none\" stroke=\"#888\"/>\n\
             <text x=\"{tx}\" y=\"{ty}\" font-size=\"11\" text-anchor=\"middle\" \
             font-family=\"sans-serif\">{name} (slope {s:.3})</text>\n",
            tx = x0 + PANEL_W / 2.0,
            ty = y0 - 6.0,
            name = panel.scene,
            s = slope.unwrap_or(0.0),
        );
        if let Some(s) = slope {
            let mean_x = panel.points.iter().map(|p| p.0).sum::<f64>() / panel.points.len() as f64;
            let mean_y = panel.points.iter().map(|p| p.1).sum::<f64>() / panel.points.len() as f64;
            let line_y = |x: f64| mean_y + s * (x - mean_x);
            let _ = write!(
                body,
                "<line x1=\"{x1}\" y1=\"{y1}\" x2=\"{x2}\" y2=\"{y2}\" \
                 stroke=\"#c33\" stroke-width=\"1.2\"/>\n",
                x1 = px(lo_x),
                y1 = py(line_y(lo_x).clamp(lo_y, hi_y)),
                x2 = px(hi_x),
                y2 = py(line_y(hi_x).clamp(lo_y, hi_y)),
            );
        }
        for &(x, y) in &panel.points {
            let _ = write!(
                body,
                "<circle cx=\"{cx}\" cy=\"{cy}\" r=\"3\" fill=\"#26c\"/>\n",
                cx = px(x),
                cy = py(y),
            );
        }
    }

    let title = format!(
        "{title_prefix}: {positive}/{total} scenes with positive slope",
        total = panels.len()
    );
    let svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n\
         <text x=\"{tx}\" y=\"20\" font-size=\"14\" text-anchor=\"middle\" \
         font-family=\"sans-serif\">{title}</text>\n{body}</svg>\n",
        tx = width / 2.0,
    );
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))?;
    Ok(PlotSummary { slopes, positive_slopes: positive })
}
