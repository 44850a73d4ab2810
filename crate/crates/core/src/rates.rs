//! Empirical convergence rates from log-log regression of loss on `M_t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recursion::{Trajectory, TrajectoryPoint};
use crate::theory::predicted_rate;

pub const DEFAULT_BURN_IN: f64 = 0.1;
pub const DEFAULT_PHASE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    W1,
    Mmd,
}

impl Metric {
    pub fn of(self, p: &TrajectoryPoint) -> f64 {
        match self {
            Metric::W1 => p.w1,
            Metric::Mmd => p.mmd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// `-slope`.
    pub rate: f64,
    pub r_squared: f64,
    pub burn_in_fraction: f64,
    pub log_normalized: bool,
    pub n_points: usize,
}

/// OLS of `y` on `x`: `(slope, intercept, r²)`.
pub fn least_squares(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 && sxx > 0.0 { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) } else { 1.0 };
    (slope, intercept, r2)
}

/// Fits `log(d_t / norm_t) = a + b·log M_t` over `t > burn_in·T`, where
/// `norm_t = log(t + 1)` when `normalize_log`, else 1. Nonpositive or
/// non-finite losses are dropped.
pub fn fit_power_law(
    ts: &[u64],
    m: &[f64],
    losses: &[f64],
    burn_in_fraction: f64,
    normalize_log: bool,
) -> Result<RateFit> {
    if !(0.0..1.0).contains(&burn_in_fraction) {
        return Err(Error::invalid("burn_in_fraction", format!("must lie in [0, 1), got {burn_in_fraction}")));
    }
    let t_max = ts.iter().copied().max().unwrap_or(0);
    let cut = burn_in_fraction * t_max as f64;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for ((&t, &mt), &d) in ts.iter().zip(m).zip(losses) {
        if (t as f64) <= cut || t == 0 || !(d > 0.0 && d.is_finite()) || !(mt > 0.0) {
            continue;
        }
        let norm = if normalize_log { ((t + 1) as f64).ln() } else { 1.0 };
        xs.push(mt.ln());
        ys.push((d / norm).ln());
    }
    if xs.len() < 3 {
        return Err(Error::DegenerateTrajectory { usable: xs.len() });
    }
    let (slope, intercept, r_squared) = least_squares(&xs, &ys);
    Ok(RateFit {
        slope,
        intercept,
        rate: -slope,
        r_squared,
        burn_in_fraction,
        log_normalized: normalize_log,
        n_points: xs.len(),
    })
}

pub fn fit_rate(traj: &Trajectory, metric: Metric, burn_in_fraction: f64, normalize_log: bool) -> Result<RateFit> {
    let ts: Vec<u64> = traj.points.iter().map(|p| p.t).collect();
    let m: Vec<f64> = traj.points.iter().map(|p| p.m_t as f64).collect();
    let d: Vec<f64> = traj.points.iter().map(|p| metric.of(p)).collect();
    fit_power_law(&ts, &m, &d, burn_in_fraction, normalize_log)
}

/// Whether the configuration sits on the phase boundary `min(p, q) = α`.
pub fn should_normalize(alpha_effective: f64, p: f64, q: Option<f64>, eps: f64) -> bool {
    let limit = p.min(q.unwrap_or(f64::INFINITY));
    (limit - alpha_effective).abs() <= eps
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub per_replicate: Vec<RateFit>,
    pub mean_rate: f64,
    /// Sample (n - 1) standard deviation; 0 for a single replicate.
    pub sd_rate: f64,
    pub theory_rate: f64,
    pub theory_log_flag: bool,
}

pub fn summarize(fits: Vec<RateFit>, p: f64, q: Option<f64>, alpha: f64) -> Result<RateSummary> {
    if fits.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = fits.len() as f64;
    let mean = fits.iter().map(|f| f.rate).sum::<f64>() / n;
    let sd = if fits.len() > 1 {
        (fits.iter().map(|f| (f.rate - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let theory = predicted_rate(p, alpha, q);
    Ok(RateSummary {
        per_replicate: fits,
        mean_rate: mean,
        sd_rate: sd,
        theory_rate: theory.exponent,
        theory_log_flag: theory.log_factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::EstimatorSpec;
    use crate::recursion::RecursionConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trajectory(losses: impl Fn(u64, f64) -> f64, t_max: u64) -> Trajectory {
        let config = RecursionConfig::new(50, 0.5, t_max, EstimatorSpec::ecdf(0.5), 0);
        let points = (0..=t_max)
            .map(|t| {
                let m = config.accumulated_at(t);
                let d = losses(t, m as f64);
                TrajectoryPoint { t, m_t: m, w1: d, mmd: d, bias_level: 0.0 }
            })
            .collect();
        Trajectory { config, points }
    }

    #[test]
    fn exact_power_law() {
        let tr = trajectory(|_, m| 3.0 * m.powf(-0.4), 500);
        let f = fit_rate(&tr, Metric::W1, 0.1, false).unwrap();
        assert!((f.rate - 0.4).abs() < 1e-10);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-9);
        assert_eq!(f.n_points, 450);
    }

    #[test]
    fn log_normalized_boundary_sequence() {
        // M_t = c·t exactly, d_t = M_t^{-1/2}·log t
        let ts: Vec<u64> = (0..=2000).collect();
        let m: Vec<f64> = ts.iter().map(|&t| 100.0 * t as f64).collect();
        let d: Vec<f64> = ts.iter().zip(&m).map(|(&t, m)| m.powf(-0.5) * (t as f64).ln()).collect();
        let f = fit_power_law(&ts, &m, &d, 0.1, true).unwrap();
        assert!((f.rate - 0.5).abs() < 0.02, "{}", f.rate);
        assert!(f.log_normalized);
    }

    #[test]
    fn constant_losses() {
        let tr = trajectory(|_, _| 0.7, 100);
        assert!(fit_rate(&tr, Metric::Mmd, 0.1, false).unwrap().rate.abs() < 1e-10);
    }

    #[test]
    fn degenerate_inputs() {
        let tr = trajectory(|t, _| if t < 99 { 0.0 } else { 1.0 }, 100);
        assert_eq!(fit_rate(&tr, Metric::W1, 0.1, false), Err(Error::DegenerateTrajectory { usable: 2 }));
        let tr = trajectory(|_, m| m.powf(-0.3), 100);
        assert!(fit_rate(&tr, Metric::W1, 1.0, false).is_err());
    }

    #[test]
    fn phase_detection() {
        assert!(should_normalize(0.5, 0.5, None, 1e-9));
        assert!(!should_normalize(0.3, 0.5, None, 1e-9));
        assert!(should_normalize(0.5, 0.5, Some(0.5), 1e-9));
        assert!(should_normalize(0.25, 0.5, Some(0.25), 1e-9));
        assert!(!should_normalize(0.75, 0.5, Some(0.25), 1e-9));
    }

    fn fit_with_rate(rate: f64) -> RateFit {
        RateFit {
            slope: -rate,
            intercept: 0.0,
            rate,
            r_squared: 1.0,
            burn_in_fraction: 0.1,
            log_normalized: false,
            n_points: 10,
        }
    }

    #[test]
    fn summaries() {
        let s = summarize(vec![fit_with_rate(0.37)], 0.5, None, 0.6).unwrap();
        assert_eq!(s.mean_rate, 0.37);
        assert_eq!(s.sd_rate, 0.0);
        let s = summarize(vec![fit_with_rate(0.4), fit_with_rate(0.6)], 0.5, None, 0.6).unwrap();
        assert!((s.mean_rate - 0.5).abs() < 1e-15);
        assert!((s.sd_rate - 0.14142135623730953).abs() < 1e-12);
        let s = summarize(vec![fit_with_rate(0.2)], 0.5, Some(0.25), 0.75).unwrap();
        assert_eq!(s.theory_rate, 0.25);
        assert!(!s.theory_log_flag);
        assert!(summarize(vec![], 0.5, None, 0.5).is_err());
    }

    proptest::proptest! {
        #[test]
        fn scale_changes_intercept_only(seed in 0u64..5000, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise: Vec<f64> = (0..=300).map(|_| rng.random_range(0.5..2.0)).collect();
            let a = trajectory(|t, m| noise[t as usize] * m.powf(-0.3), 300);
            let b = trajectory(|t, m| scale * noise[t as usize] * m.powf(-0.3), 300);
            let fa = fit_rate(&a, Metric::W1, 0.1, false).unwrap();
            let fb = fit_rate(&b, Metric::W1, 0.1, false).unwrap();
            proptest::prop_assert!((fa.slope - fb.slope).abs() < 1e-9);
            proptest::prop_assert!((fb.intercept - fa.intercept - scale.ln()).abs() < 1e-9);
        }

        #[test]
        fn burn_in_irrelevant_on_exact_laws(burn in 0.0f64..0.9, rate in 0.05f64..1.5) {
            let tr = trajectory(|_, m| 2.0 * m.powf(-rate), 400);
            let f = fit_rate(&tr, Metric::W1, burn, false).unwrap();
            proptest::prop_assert!((f.rate - rate).abs() < 1e-9);
        }

        #[test]
        fn mean_within_range(rates in proptest::collection::vec(0.0f64..1.0, 1..30)) {
            let fits: Vec<RateFit> = rates.iter().map(|&r| fit_with_rate(r)).collect();
            let s = summarize(fits, 0.5, None, 0.5).unwrap();
            let lo = rates.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            proptest::prop_assert!(s.mean_rate >= lo - 1e-12 && s.mean_rate <= hi + 1e-12);
        }
    }
}
