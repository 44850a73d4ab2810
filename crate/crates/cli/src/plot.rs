//! Self-contained SVG figures. Each carries a `<metadata>` element with
//! the plotted numbers as JSON.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crtlab_core::distributions::{mixture_cdf, mixture_pdf};
use crtlab_core::estimators::normalize_density;
use crtlab_core::{predicted_rate, EstimatorKind, EstimatorState, EvalGrid, Regime, TargetSpec};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;

const EMPIRICAL: &str = "#1f77b4";
const THEORY: &str = "#d62728";

/// Linear map from data coordinates to the plot area.
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        MARGIN + (v - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - MARGIN - (v - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }

    fn polyline(&self, xs: &[f64], ys: &[f64]) -> String {
        let mut s = String::new();
        for (x, y) in xs.iter().zip(ys) {
            let _ = write!(s, "{:.2},{:.2} ", self.x(*x), self.y(*y));
        }
        s.trim_end().to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(out: &mut String, title: &str, meta: &impl Serialize) {
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let json = serde_json::to_string(meta).expect("metadata serializes");
    let _ = writeln!(out, r#"<metadata id="crtlab">{}</metadata>"#, escape(&json));
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
}

fn axes(out: &mut String, f: &Frame, xlabel: &str, ylabel: &str, ticks: usize) {
    let (l, r, b, t) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(out, r#"<path d="M{l},{t} L{l},{b} L{r},{b}" fill="none" stroke="black"/>"#);
    for i in 0..=ticks {
        let u = i as f64 / ticks as f64;
        let xv = f.x0 + u * (f.x1 - f.x0);
        let yv = f.y0 + u * (f.y1 - f.y0);
        let (px, py) = (f.x(xv), f.y(yv));
        let _ = writeln!(out, r#"<line x1="{px:.2}" y1="{b}" x2="{px:.2}" y2="{:.2}" stroke="black"/>"#, b + 5.0);
        let _ = writeln!(out, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{xv:.2}</text>"#, b + 18.0);
        let _ = writeln!(out, r#"<line x1="{:.2}" y1="{py:.2}" x2="{l}" y2="{py:.2}" stroke="black"/>"#, l - 5.0);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{yv:.2}</text>"#, l - 8.0, py + 4.0);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 15.0, escape(xlabel));
    let _ = writeln!(
        out,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
        HEIGHT / 2.0,
        escape(ylabel)
    );
}

fn legend(out: &mut String, entries: &[(&str, &str)]) {
    for (i, (color, label)) in entries.iter().enumerate() {
        let y = MARGIN + 8.0 + 18.0 * i as f64;
        let x = WIDTH - MARGIN - 150.0;
        let _ = writeln!(out, r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/>"#, x + 24.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, x + 30.0, y + 4.0, escape(label));
    }
}

fn finish(mut svg: String, path: &Path) -> Result<()> {
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub alpha: f64,
    pub mean: f64,
    pub sd: f64,
    pub theory: f64,
}

#[derive(Serialize)]
struct RateMeta<'a> {
    kind: &'static str,
    metric: &'a str,
    points: &'a [RatePoint],
}

/// Empirical mean ± sd band and theory curve against α.
pub fn emit_rate_plot(points: &[RatePoint], metric: &str, title: &str, path: &Path) -> Result<()> {
    if points.len() < 2 {
        bail!("a rate plot needs at least two α values, got {}", points.len());
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
    let xs: Vec<f64> = pts.iter().map(|p| p.alpha).collect();
    let hi = pts.iter().map(|p| (p.mean + p.sd).max(p.theory)).fold(0.0f64, f64::max);
    let lo = pts.iter().map(|p| (p.mean - p.sd).min(p.theory)).fold(0.0f64, f64::min);
    let f = Frame { x0: 0.0, x1: 1.0, y0: lo, y1: (hi * 1.1).max(lo + 0.1) };
    let mut svg = String::new();
    open(&mut svg, title, &RateMeta { kind: "rate_plot", metric, points: &pts });
    axes(&mut svg, &f, "real-data fraction α", &format!("{metric} convergence rate"), 5);
    let upper: Vec<f64> = pts.iter().map(|p| p.mean + p.sd).collect();
    let lower: Vec<f64> = pts.iter().map(|p| p.mean - p.sd).collect();
    let mut band_x = xs.clone();
    band_x.extend(xs.iter().rev());
    let mut band_y = upper;
    band_y.extend(lower.iter().rev());
    let _ = writeln!(
        svg,
        r#"<polygon id="band" points="{}" fill="{EMPIRICAL}" fill-opacity="0.2" stroke="none"/>"#,
        f.polyline(&band_x, &band_y)
    );
    let means: Vec<f64> = pts.iter().map(|p| p.mean).collect();
    let theory: Vec<f64> = pts.iter().map(|p| p.theory).collect();
    let _ = writeln!(
        svg,
        r#"<polyline id="empirical" points="{}" fill="none" stroke="{EMPIRICAL}" stroke-width="2"/>"#,
        f.polyline(&xs, &means)
    );
    let _ = writeln!(
        svg,
        r#"<polyline id="theory" points="{}" fill="none" stroke="{THEORY}" stroke-width="2" stroke-dasharray="6 3"/>"#,
        f.polyline(&xs, &theory)
    );
    for p in &pts {
        let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{EMPIRICAL}"/>"#, f.x(p.alpha), f.y(p.mean));
    }
    legend(&mut svg, &[(EMPIRICAL, "empirical (mean ± sd)"), (THEORY, "theory")]);
    finish(svg, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseCell {
    pub p: f64,
    pub alpha: f64,
    pub regime: Regime,
}

#[derive(Serialize)]
struct PhaseMeta<'a> {
    kind: &'static str,
    cells: &'a [PhaseCell],
}

pub fn regime_color(r: Regime) -> &'static str {
    match r {
        Regime::RealDataLimited => "#d62728",
        Regime::BaselineLimited => "#1f77b4",
        Regime::BiasLimited => "#2ca02c",
        Regime::Boundary => "#222222",
    }
}

/// Regime of `min(p, α)` over the grid, with the diagonal `p = α` drawn.
pub fn emit_phase_diagram(p_grid: &[f64], alpha_grid: &[f64], path: &Path) -> Result<Vec<PhaseCell>> {
    if p_grid.is_empty() || alpha_grid.is_empty() {
        bail!("phase diagram grids must be nonempty");
    }
    let cells: Vec<PhaseCell> = p_grid
        .iter()
        .flat_map(|&p| alpha_grid.iter().map(move |&alpha| PhaseCell { p, alpha, regime: predicted_rate(p, alpha, None).regime }))
        .collect();
    let span = |g: &[f64]| {
        let lo = g.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let step = if g.len() > 1 { (hi - lo) / (g.len() - 1) as f64 } else { 0.1 };
        (lo - step / 2.0, hi + step / 2.0, step)
    };
    let (ax0, ax1, astep) = span(alpha_grid);
    let (px0, px1, pstep) = span(p_grid);
    let f = Frame { x0: ax0, x1: ax1, y0: px0, y1: px1 };
    let mut svg = String::new();
    open(&mut svg, "Rate regimes of min(p, α)", &PhaseMeta { kind: "phase_diagram", cells: &cells });
    axes(&mut svg, &f, "real-data fraction α", "baseline rate p", 5);
    for c in &cells {
        let (xa, xb) = (f.x(c.alpha - astep / 2.0), f.x(c.alpha + astep / 2.0));
        let (ya, yb) = (f.y(c.p + pstep / 2.0), f.y(c.p - pstep / 2.0));
        let _ = writeln!(
            svg,
            r#"<rect x="{xa:.2}" y="{ya:.2}" width="{:.2}" height="{:.2}" fill="{}" fill-opacity="0.75"><title>p={} α={} {:?}</title></rect>"#,
            xb - xa,
            yb - ya,
            regime_color(c.regime),
            c.p,
            c.alpha,
            c.regime
        );
    }
    let d0 = ax0.max(px0);
    let d1 = ax1.min(px1);
    let _ = writeln!(
        svg,
        r#"<line id="boundary" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black" stroke-width="2"/>"#,
        f.x(d0),
        f.y(d0),
        f.x(d1),
        f.y(d1)
    );
    legend(
        &mut svg,
        &[
            (regime_color(Regime::RealDataLimited), "real-data limited"),
            (regime_color(Regime::BaselineLimited), "baseline limited"),
            (regime_color(Regime::Boundary), "boundary p = α"),
        ],
    );
    finish(svg, path)?;
    Ok(cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotInfo {
    /// `"density"` for smoothed estimators, `"cdf"` for the ECDF.
    pub curve: &'static str,
    /// Largest pointwise gap between the plotted curves.
    pub max_gap: f64,
    pub samples: usize,
    pub t: u64,
}

#[derive(Serialize)]
struct SnapshotMeta {
    kind: &'static str,
    #[serde(flatten)]
    info: SnapshotInfo,
}

/// True versus estimated density (or CDF for the ECDF) on the grid.
pub fn emit_density_snapshot(state: &EstimatorState, target: &TargetSpec, grid: &EvalGrid, path: &Path) -> Result<SnapshotInfo> {
    if state.sample_count() == 0 {
        bail!("cannot plot an estimator with no samples");
    }
    let xs = grid.points();
    let (curve, truth, est) = match state.spec().kind {
        EstimatorKind::Kde => {
            let mut truth: Vec<f64> = xs.iter().map(|&x| mixture_pdf(target, x)).collect();
            normalize_density(&mut truth, grid);
            ("density", truth, state.pdf_on_grid(grid)?)
        }
        EstimatorKind::Ecdf => ("cdf", xs.iter().map(|&x| mixture_cdf(target, x)).collect(), state.cdf_on_grid(grid)?),
    };
    let max_gap = truth.iter().zip(&est).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let info = SnapshotInfo { curve, max_gap, samples: state.sample_count(), t: state.t() };
    let top = truth.iter().chain(&est).cloned().fold(0.0, f64::max);
    let f = Frame { x0: grid.lo(), x1: grid.hi(), y0: 0.0, y1: top * 1.1 };
    let mut svg = String::new();
    let title = format!("Estimate after t = {} ({} samples)", info.t, info.samples);
    open(&mut svg, &title, &SnapshotMeta { kind: "density_snapshot", info });
    axes(&mut svg, &f, "x", curve, 5);
    let _ = writeln!(
        svg,
        r#"<polyline id="target" points="{}" fill="none" stroke="{THEORY}" stroke-width="2"/>"#,
        f.polyline(xs, &truth)
    );
    let _ = writeln!(
        svg,
        r#"<polyline id="estimate" points="{}" fill="none" stroke="{EMPIRICAL}" stroke-width="2"/>"#,
        f.polyline(xs, &est)
    );
    legend(&mut svg, &[(THEORY, "target"), (EMPIRICAL, "estimate")]);
    finish(svg, path)?;
    Ok(info)
}

/// The `<metadata>` JSON of a figure written by this module.
pub fn read_metadata(svg: &str) -> Result<serde_json::Value> {
    let start = svg.find(r#"<metadata id="crtlab">"#).context("no metadata element")? + r#"<metadata id="crtlab">"#.len();
    let end = svg[start..].find("</metadata>").context("unterminated metadata")? + start;
    let json = svg[start..end].replace("&lt;", "<").replace("&gt;", ">").replace("&amp;", "&");
    Ok(serde_json::from_str(&json)?)
}
