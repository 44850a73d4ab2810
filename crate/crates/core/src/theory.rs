//! Predicted convergence rates and numeric checks of the identities and
//! bounds the rate analysis relies on.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rates::{fit_power_law, RateFit};

/// Ties closer than this count as the phase boundary.
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `α < min(p, q)`: the real-data fraction sets the rate.
    RealDataLimited,
    /// `p < α` and `p ≤ q`.
    BaselineLimited,
    /// `q < α` and `q < p`.
    BiasLimited,
    /// `min(p, q) = α`: rate `t^{-α} log t`.
    Boundary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePrediction {
    pub exponent: f64,
    pub log_factor: bool,
    pub regime: Regime,
}

/// `min(p, q, α)` with the boundary log factor.
pub fn predicted_rate(p: f64, alpha: f64, q: Option<f64>) -> RatePrediction {
    let q_val = q.unwrap_or(f64::INFINITY);
    let limit = p.min(q_val);
    if (limit - alpha).abs() <= TIE_EPS {
        return RatePrediction { exponent: alpha, log_factor: true, regime: Regime::Boundary };
    }
    if alpha < limit {
        RatePrediction { exponent: alpha, log_factor: false, regime: Regime::RealDataLimited }
    } else if p <= q_val {
        RatePrediction { exponent: p, log_factor: false, regime: Regime::BaselineLimited }
    } else {
        RatePrediction { exponent: q_val, log_factor: false, regime: Regime::BiasLimited }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    Kde,
    Wgan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMetric {
    W1,
    Mmd,
}

/// Uncontaminated rate exponent for smoothness `s` in dimension `d`.
pub fn baseline_rate_table(method: BaselineMethod, metric: BaselineMetric, s: f64, d: u32) -> f64 {
    let d = d as f64;
    match (method, metric) {
        (_, BaselineMetric::Mmd) => 0.5,
        (BaselineMethod::Kde, BaselineMetric::W1) => s / (2.0 * s + d),
        (BaselineMethod::Wgan, BaselineMetric::W1) => (s + 1.0) / (2.0 * s + 2.0 + d),
    }
}

/// `(1/t)·Σ_{j=1}^t j^{-q}` by direct summation.
pub fn cesaro_average(q: f64, t: u64) -> f64 {
    let s: f64 = (1..=t).map(|j| (j as f64).powf(-q)).sum();
    s / t as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub final_ratio: f64,
    pub eventually_monotone: bool,
}

/// Ratio of the Cesàro average to `t^{-min(q,1)}` (times `log t` at
/// `q = 1`) over `t ∈ [10, t_max]`.
pub fn check_cesaro_bound(q: f64, t_max: u64) -> Result<RatioReport> {
    if t_max < 100 {
        return Err(Error::invalid("t_max", format!("need t_max >= 100, got {t_max}")));
    }
    if !(q > 0.0) {
        return Err(Error::invalid("q", format!("must be > 0, got {q}")));
    }
    let rate = q.min(1.0);
    let boundary = (q - 1.0).abs() < TIE_EPS;
    let mut sum = 0.0;
    let mut ratios = Vec::with_capacity(t_max as usize);
    for t in 1..=t_max {
        sum += (t as f64).powf(-q);
        if t >= 10 {
            let tf = t as f64;
            let envelope = tf.powf(-rate) * if boundary { tf.ln() } else { 1.0 };
            ratios.push(sum / tf / envelope);
        }
    }
    Ok(ratio_report(&ratios))
}

fn ratio_report(ratios: &[f64]) -> RatioReport {
    let min_ratio = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_ratio = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tail = &ratios[ratios.len() / 2..];
    let up = tail.windows(2).all(|w| w[1] >= w[0]);
    let down = tail.windows(2).all(|w| w[1] <= w[0]);
    RatioReport {
        min_ratio,
        max_ratio,
        final_ratio: *ratios.last().unwrap_or(&f64::NAN),
        eventually_monotone: up || down,
    }
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0`: Lanczos (g = 7, n = 9) for `x ≥ 0.5`, reflection
/// below.
pub fn log_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::invalid("x", format!("log_gamma needs x > 0, got {x}")));
    }
    Ok(ln_gamma_pos(x))
}

fn ln_gamma_pos(x: f64) -> f64 {
    if x < 0.5 {
        // Γ(x)Γ(1-x) = π / sin(πx)
        return (PI / (PI * x).sin()).ln() - ln_gamma_pos(1.0 - x);
    }
    if x == 1.0 || x == 2.0 {
        return 0.0;
    }
    let z = x - 1.0;
    let mut a = LANCZOS_COEF[0];
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        a += c / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    0.5 * (2.0 * PI).ln() + (z + 0.5) * t.ln() - t + a.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProductIdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub abs_diff: f64,
}

/// `∏_{k=j}^{t-2} (k+1-α)/(k+1)` against
/// `Γ(t-α)/Γ(j+1-α) · Γ(j+1)/Γ(t)`.
pub fn check_product_gamma_identity(j: u64, t: u64, alpha: f64) -> Result<ProductIdentityCheck> {
    if j < 1 || t < j + 2 {
        return Err(Error::invalid("j", format!("need 1 <= j <= t - 2, got j={j}, t={t}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha", format!("must lie in (0, 1), got {alpha}")));
    }
    let lhs: f64 = (j..=t - 2).map(|k| (k as f64 + 1.0 - alpha) / (k as f64 + 1.0)).product();
    let (tf, jf) = (t as f64, j as f64);
    let log_rhs = ln_gamma_pos(tf - alpha) - ln_gamma_pos(jf + 1.0 - alpha) + ln_gamma_pos(jf + 1.0)
        - ln_gamma_pos(tf);
    let rhs = log_rhs.exp();
    Ok(ProductIdentityCheck { lhs, rhs, abs_diff: (lhs - rhs).abs() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaRatioReport {
    pub alpha: f64,
    /// `Γ(t-α)/Γ(t)·t^α` over the range.
    pub decay: RatioReport,
    /// `Γ(j+1)/Γ(j+1-α)·j^{-α}` over the range.
    pub growth: RatioReport,
}

pub fn check_gamma_ratio_bounds(alpha: f64, ts: &[u64]) -> Result<GammaRatioReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha", format!("must lie in (0, 1), got {alpha}")));
    }
    if ts.is_empty() || ts.iter().any(|&t| t < 2) {
        return Err(Error::invalid("t_range", "need a nonempty range with every t >= 2"));
    }
    let decay: Vec<f64> = ts
        .iter()
        .map(|&t| {
            let t = t as f64;
            (ln_gamma_pos(t - alpha) - ln_gamma_pos(t) + alpha * t.ln()).exp()
        })
        .collect();
    let growth: Vec<f64> = ts
        .iter()
        .map(|&j| {
            let j = j as f64;
            (ln_gamma_pos(j + 1.0) - ln_gamma_pos(j + 1.0 - alpha) - alpha * j.ln()).exp()
        })
        .collect();
    Ok(GammaRatioReport { alpha, decay: ratio_report(&decay), growth: ratio_report(&growth) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    /// `d_0 ..= d_{t_max}`.
    pub values: Vec<f64>,
    pub fit: RateFit,
}

/// Iterates `d_t = C·(t^{-p} + t^{-min(q,1)}) + ((1-α)/t)·Σ_{j<t} d_j` with
/// `d_0 = C` and fits the tail exponent on `t > t_max/10` (log-normalized at
/// `min(p, q) = α`).
///
/// The constant multiplies the learning and bias terms only: scaling the
/// contamination term by `C ≠ 1` would change the exponent itself.
pub fn simulate_recursion_envelope(p: f64, alpha: f64, c: f64, t_max: u64, q: Option<f64>) -> Result<Envelope> {
    if !(p > 0.0) {
        return Err(Error::invalid("p", format!("must be > 0, got {p}")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid("alpha", format!("must lie in (0, 1], got {alpha}")));
    }
    if !(c > 0.0) {
        return Err(Error::invalid("C", format!("must be > 0, got {c}")));
    }
    if t_max < 30 {
        return Err(Error::invalid("t_max", format!("need t_max >= 30, got {t_max}")));
    }
    let bias_rate = q.map(|q| q.min(1.0));
    let mut values = Vec::with_capacity(t_max as usize + 1);
    values.push(c);
    let mut partial = c;
    for t in 1..=t_max {
        let tf = t as f64;
        let mut drive = tf.powf(-p);
        if let Some(r) = bias_rate {
            drive += tf.powf(-r);
        }
        let d = c * drive + (1.0 - alpha) / tf * partial;
        values.push(d);
        partial += d;
    }
    let ts: Vec<u64> = (0..=t_max).collect();
    let m: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    let normalize = (p.min(q.unwrap_or(f64::INFINITY)) - alpha).abs() <= TIE_EPS;
    let fit = fit_power_law(&ts, &m, &values, 0.1, normalize)?;
    Ok(Envelope { values, fit })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome<T> {
    pub passed: bool,
    pub detail: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductIdentitySweep {
    pub triples: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CesaroEntry {
    pub q: f64,
    pub t_max: u64,
    pub report: RatioReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeEntry {
    pub p: f64,
    pub alpha: f64,
    pub q: Option<f64>,
    pub predicted: f64,
    pub fitted: f64,
    pub log_normalized: bool,
}

/// Machine-readable summary of every theory oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub product_identity: CheckOutcome<ProductIdentitySweep>,
    pub gamma_ratios: CheckOutcome<Vec<GammaRatioReport>>,
    pub cesaro: CheckOutcome<Vec<CesaroEntry>>,
    pub envelope: CheckOutcome<Vec<EnvelopeEntry>>,
    pub all_passed: bool,
}

pub const ENVELOPE_P_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
pub const ENVELOPE_ALPHA_GRID: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
/// `(p, α, q)` cells exercising the bias term.
pub const ENVELOPE_BIAS_CELLS: [(f64, f64, f64); 5] =
    [(0.9, 0.9, 0.25), (0.9, 0.6, 0.25), (0.7, 0.8, 0.4), (0.5, 0.3, 0.75), (0.9, 0.3, 0.5)];

/// Runs every theory check with the acceptance tolerances.
pub fn theory_report(seed: u64) -> Result<TheoryReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel: f64 = 0.0;
    let triples = 1000;
    for _ in 0..triples {
        let t = rng.random_range(3..=2000u64);
        let j = rng.random_range(1..=t - 2);
        let alpha = rng.random_range(0.001..0.999);
        let c = check_product_gamma_identity(j, t, alpha)?;
        max_rel = max_rel.max(c.abs_diff / c.lhs);
    }
    let product_identity = CheckOutcome {
        passed: max_rel <= 1e-10,
        detail: ProductIdentitySweep { triples, max_relative_error: max_rel, tolerance: 1e-10 },
    };

    let ts: Vec<u64> = (50..=10_000).collect();
    let mut ratios = Vec::new();
    for a in 1..=9 {
        ratios.push(check_gamma_ratio_bounds(a as f64 / 10.0, &ts)?);
    }
    let gamma_ok = ratios.iter().all(|r| r.decay.min_ratio >= 0.9 && r.decay.max_ratio <= 1.1);
    let gamma_ratios = CheckOutcome { passed: gamma_ok, detail: ratios };

    let mut cesaro_entries = Vec::new();
    for q in [0.25, 0.5, 1.0, 2.0] {
        cesaro_entries.push(CesaroEntry { q, t_max: 10_000, report: check_cesaro_bound(q, 10_000)? });
    }
    let cesaro_ok = cesaro_entries
        .iter()
        .all(|e| e.report.max_ratio.is_finite() && e.report.min_ratio > 0.0 && e.report.eventually_monotone);
    let cesaro = CheckOutcome { passed: cesaro_ok, detail: cesaro_entries };

    let mut cells: Vec<(f64, f64, Option<f64>)> = Vec::new();
    for p in ENVELOPE_P_GRID {
        for a in ENVELOPE_ALPHA_GRID {
            cells.push((p, a, None));
        }
    }
    cells.extend(ENVELOPE_BIAS_CELLS.iter().map(|&(p, a, q)| (p, a, Some(q))));
    let mut entries = Vec::new();
    for (p, alpha, q) in cells {
        let env = simulate_recursion_envelope(p, alpha, 1.0, 1_000_000, q)?;
        entries.push(EnvelopeEntry {
            p,
            alpha,
            q,
            predicted: predicted_rate(p, alpha, q).exponent,
            fitted: env.fit.rate,
            log_normalized: env.fit.log_normalized,
        });
    }
    let env_ok = entries.iter().all(|e| (e.fitted - e.predicted).abs() <= 0.05);
    let envelope = CheckOutcome { passed: env_ok, detail: entries };

    let all_passed = product_identity.passed && gamma_ratios.passed && cesaro.passed && envelope.passed;
    Ok(TheoryReport { product_identity, gamma_ratios, cesaro, envelope, all_passed })
}
