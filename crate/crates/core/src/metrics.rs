//! Distributional discrepancies on the evaluation grid and between samples.

use serde::{Deserialize, Serialize};

use crate::distributions::{mixture_cdf, mixture_pdf, EvalGrid, TargetSpec};
use crate::error::{Error, Result};
use crate::estimators::{normalize_density, EstimatorKind, EstimatorState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSettings {
    /// Gaussian kernel bandwidth for the MMD.
    pub mmd_kernel_bandwidth: f64,
    pub report_squared_mmd: bool,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self { mmd_kernel_bandwidth: 1.0, report_squared_mmd: false }
    }
}

impl MetricSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.mmd_kernel_bandwidth > 0.0 && self.mmd_kernel_bandwidth.is_finite()) {
            return Err(Error::invalid(
                "mmd_kernel_bandwidth",
                format!("must be > 0, got {}", self.mmd_kernel_bandwidth),
            ));
        }
        Ok(())
    }
}

/// Trapezoid quadrature weights for the grid.
pub fn trapezoid_weights(grid: &EvalGrid) -> Vec<f64> {
    let pts = grid.points();
    let m = pts.len();
    let mut w = vec![0.0; m];
    for i in 0..m - 1 {
        let half = 0.5 * (pts[i + 1] - pts[i]);
        w[i] += half;
        w[i + 1] += half;
    }
    w
}

fn check_lengths(a: &[f64], b: &[f64], grid: &EvalGrid) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    if a.len() != grid.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: grid.len() });
    }
    Ok(())
}

/// `∫|F_a - F_b|` by the trapezoid rule on the grid.
pub fn w1_grid(cdf_a: &[f64], cdf_b: &[f64], grid: &EvalGrid) -> Result<f64> {
    check_lengths(cdf_a, cdf_b, grid)?;
    let pts = grid.points();
    let mut total = 0.0;
    for i in 0..pts.len() - 1 {
        let l = (cdf_a[i] - cdf_b[i]).abs();
        let r = (cdf_a[i + 1] - cdf_b[i + 1]).abs();
        total += 0.5 * (l + r) * (pts[i + 1] - pts[i]);
    }
    Ok(total)
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Exact 1-D W1 between two empirical measures via the quantile coupling.
///
/// For unequal sizes the piecewise-constant quantile functions are integrated
/// exactly; breakpoints are compared in integer units of `1/(n·m)`.
pub fn w1_quantile(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (xs, ys) = (sorted(xs), sorted(ys));
    let (n, m) = (xs.len() as u128, ys.len() as u128);
    if n == m {
        let s: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - y).abs()).sum();
        return Ok(s / n as f64);
    }
    let (mut i, mut j) = (0usize, 0usize);
    let mut pos = 0u128;
    let mut total = 0.0;
    while i < xs.len() && j < ys.len() {
        let next_x = (i as u128 + 1) * m;
        let next_y = (j as u128 + 1) * n;
        let next = next_x.min(next_y);
        total += (xs[i] - ys[j]).abs() * (next - pos) as f64;
        pos = next;
        if next_x == next {
            i += 1;
        }
        if next_y == next {
            j += 1;
        }
    }
    Ok(total / (n * m) as f64)
}

/// Precomputed quadratic form `diag(w)·K·diag(w)` for grid MMD.
#[derive(Debug, Clone)]
pub struct MmdOperator {
    matrix: Vec<f64>,
    len: usize,
    report_squared: bool,
}

impl MmdOperator {
    pub fn new(grid: &EvalGrid, settings: &MetricSettings) -> Result<Self> {
        settings.validate()?;
        let pts = grid.points();
        let w = trapezoid_weights(grid);
        let m = pts.len();
        let inv = 1.0 / (2.0 * settings.mmd_kernel_bandwidth * settings.mmd_kernel_bandwidth);
        let mut matrix = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                let d = pts[i] - pts[j];
                matrix[i * m + j] = w[i] * w[j] * (-d * d * inv).exp();
            }
        }
        Ok(Self { matrix, len: m, report_squared: settings.report_squared_mmd })
    }

    pub fn squared(&self, pdf_a: &[f64], pdf_b: &[f64]) -> Result<f64> {
        if pdf_a.len() != pdf_b.len() {
            return Err(Error::LengthMismatch { left: pdf_a.len(), right: pdf_b.len() });
        }
        if pdf_a.len() != self.len {
            return Err(Error::LengthMismatch { left: pdf_a.len(), right: self.len });
        }
        let delta: Vec<f64> = pdf_a.iter().zip(pdf_b).map(|(a, b)| a - b).collect();
        let mut total = 0.0;
        for (row, di) in self.matrix.chunks_exact(self.len).zip(&delta) {
            let inner: f64 = row.iter().zip(&delta).map(|(k, dj)| k * dj).sum();
            total += di * inner;
        }
        if total < 0.0 {
            log::debug!("clamping negative MMD² {total:e} to 0");
            total = 0.0;
        }
        Ok(total)
    }

    /// MMD or MMD², per the settings this operator was built with.
    pub fn distance(&self, pdf_a: &[f64], pdf_b: &[f64]) -> Result<f64> {
        let sq = self.squared(pdf_a, pdf_b)?;
        Ok(if self.report_squared { sq } else { sq.sqrt() })
    }
}

/// Plug-in MMD between two grid densities with a Gaussian kernel.
pub fn mmd_grid(pdf_a: &[f64], pdf_b: &[f64], grid: &EvalGrid, settings: &MetricSettings) -> Result<f64> {
    check_lengths(pdf_a, pdf_b, grid)?;
    MmdOperator::new(grid, settings)?.distance(pdf_a, pdf_b)
}

/// Per-iteration measurement against a fixed reference distribution, with
/// the reference CDF, density and MMD operator cached.
#[derive(Debug, Clone)]
pub struct Evaluator {
    grid: EvalGrid,
    target_cdf: Vec<f64>,
    target_pdf: Vec<f64>,
    mmd: MmdOperator,
}

impl Evaluator {
    pub fn new(target: &TargetSpec, grid: &EvalGrid, settings: &MetricSettings) -> Result<Self> {
        let target_cdf = grid.points().iter().map(|&x| mixture_cdf(target, x)).collect();
        let mut target_pdf: Vec<f64> = grid.points().iter().map(|&x| mixture_pdf(target, x)).collect();
        normalize_density(&mut target_pdf, grid);
        Ok(Self { grid: grid.clone(), target_cdf, target_pdf, mmd: MmdOperator::new(grid, settings)? })
    }

    pub fn grid(&self) -> &EvalGrid {
        &self.grid
    }

    pub fn target_cdf(&self) -> &[f64] {
        &self.target_cdf
    }

    pub fn target_pdf(&self) -> &[f64] {
        &self.target_pdf
    }

    /// Density used for the MMD: the KDE itself, or for the ECDF a Gaussian
    /// smoothing at one grid spacing.
    pub fn state_density(&self, state: &EstimatorState) -> Result<Vec<f64>> {
        match state.spec().kind {
            EstimatorKind::Kde => state.pdf_on_grid(&self.grid),
            EstimatorKind::Ecdf => state.smoothed_pdf_on_grid(&self.grid, self.grid.spacing()),
        }
    }

    /// `(w1, mmd)` of the state against the reference.
    pub fn evaluate(&self, state: &EstimatorState) -> Result<(f64, f64)> {
        let cdf = state.cdf_on_grid(&self.grid)?;
        let w1 = w1_grid(&self.target_cdf, &cdf, &self.grid)?;
        let pdf = self.state_density(state)?;
        let mmd = self.mmd.distance(&self.target_pdf, &pdf)?;
        Ok((w1, mmd))
    }
}

pub fn eval_state(
    state: &EstimatorState,
    target: &TargetSpec,
    grid: &EvalGrid,
    settings: &MetricSettings,
) -> Result<(f64, f64)> {
    Evaluator::new(target, grid, settings)?.evaluate(state)
}
