//! Metric-versus-sparsity line charts as standalone SVG.
//!
//! Output depends only on the CSV rows: coordinates are printed with a fixed
//! number of decimals and series are ordered by variant.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{HarnessError, Result};
use crate::experiment::Variant;
use crate::io::{create_dir, read_csv, write_atomic, CsvRow};

const WIDTH: f64 = 680.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 220.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const TICKS: usize = 5;

const COLORS: [&str; 5] = ["#4c4c4c", "#d62728", "#1f77b4", "#2ca02c", "#ff7f0e"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    NormalizedL1,
    CosineSimilarity,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::NormalizedL1, Metric::CosineSimilarity];

    pub fn name(self) -> &'static str {
        match self {
            Metric::NormalizedL1 => "normalized_l1",
            Metric::CosineSimilarity => "cosine_similarity",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Metric::NormalizedL1 => "Normalized L1 error vs sparsity",
            Metric::CosineSimilarity => "Cosine similarity vs sparsity",
        }
    }

    fn value(self, row: &CsvRow) -> f64 {
        match self {
            Metric::NormalizedL1 => row.normalized_l1,
            Metric::CosineSimilarity => row.cosine_similarity,
        }
    }
}

fn color(variant: Variant) -> &'static str {
    let i = Variant::ALL.iter().position(|&v| v == variant).unwrap_or(0);
    COLORS[i % COLORS.len()]
}

/// Axis range covering `lo..hi`, widened when degenerate.
fn axis_range(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo > 1e-12 {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    } else {
        let pad = lo.abs().max(1.0) * 0.05;
        (lo - pad, hi + pad)
    }
}

/// Renders one metric chart.
pub fn render_svg(rows: &[CsvRow], metric: Metric) -> Result<String> {
    if rows.is_empty() {
        return Err(HarnessError::Schema("no data rows".into()));
    }
    let mut series: BTreeMap<Variant, Vec<(f64, f64)>> = BTreeMap::new();
    for row in rows {
        let y = metric.value(row);
        if !row.sparsity.is_finite() || !y.is_finite() {
            return Err(HarnessError::Schema(format!("non-finite value in {} row", row.variant)));
        }
        series.entry(row.variant).or_default().push((row.sparsity, y));
    }
    for points in series.values_mut() {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let all = series.values().flatten();
    let (x_lo, x_hi) = all.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.0), hi.max(p.0))
    });
    let (y_lo, y_hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.1), hi.max(p.1))
    });
    let (x0, x1) = axis_range(x_lo, x_hi);
    let (y0, y1) = axis_range(y_lo, y_hi);
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * plot_h;

    let mut s = String::new();
    // Writing to a String cannot fail.
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + plot_w / 2.0,
        metric.title()
    );
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for i in 0..=TICKS {
        let t = i as f64 / TICKS as f64;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{xv:.3}</text>"#,
            TOP + plot_h,
            TOP + plot_h + 5.0,
            TOP + plot_h + 18.0
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{yv:.4}</text>"#,
            LEFT - 5.0,
            LEFT - 8.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">sparsity</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        metric.name()
    );
    for (i, (variant, points)) in series.iter().enumerate() {
        let c = color(*variant);
        if points.len() > 1 {
            let coords: Vec<String> = points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#,
                coords.join(" ")
            );
        }
        for &(x, y) in points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{c}"/>"#, sx(x), sy(y));
        }
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = WIDTH - RIGHT + 15.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.2}" y="{:.2}" width="12" height="12" fill="{c}"/><text x="{:.2}" y="{:.2}">{variant}</text>"#,
            ly - 10.0,
            lx + 18.0,
            ly
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes `<metric>.svg` for every metric into `out_dir`.
pub fn render_plots(csv_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_csv(csv_path)?;
    let svgs = Metric::ALL
        .iter()
        .map(|&m| Ok((m, render_svg(&rows, m)?)))
        .collect::<Result<Vec<_>>>()?;
    create_dir(out_dir)?;
    let mut paths = Vec::new();
    for (m, svg) in svgs {
        let path = out_dir.join(format!("{}.svg", m.name()));
        write_atomic(&path, svg.as_bytes())?;
        paths.push(path);
    }
    Ok(paths)
}
