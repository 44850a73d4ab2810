//! Closed-form 1-D Gaussian mixtures: the ground-truth target, the
//! contaminating bias component and the evaluation grid.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawComponent", deny_unknown_fields)]
pub struct GaussianComponent {
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawComponent {
    mu: f64,
    sigma: f64,
}

impl TryFrom<RawComponent> for GaussianComponent {
    type Error = Error;
    fn try_from(raw: RawComponent) -> Result<Self> {
        GaussianComponent::new(raw.mu, raw.sigma)
    }
}

impl GaussianComponent {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::invalid("mu", format!("must be finite, got {mu}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid("sigma", format!("must be > 0, got {sigma}")));
        }
        Ok(Self { mu, sigma })
    }

    pub fn pdf(&self, x: f64) -> f64 {
        normal_pdf((x - self.mu) / self.sigma) / self.sigma
    }

    pub fn cdf(&self, x: f64) -> f64 {
        normal_cdf((x - self.mu) / self.sigma)
    }
}

/// A finite Gaussian mixture with validated weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTarget", deny_unknown_fields)]
pub struct TargetSpec {
    weights: Vec<f64>,
    components: Vec<GaussianComponent>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTarget {
    weights: Vec<f64>,
    components: Vec<GaussianComponent>,
}

impl TryFrom<RawTarget> for TargetSpec {
    type Error = Error;
    fn try_from(raw: RawTarget) -> Result<Self> {
        TargetSpec::new(raw.weights, raw.components)
    }
}

impl TargetSpec {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("components", "at least one component required"));
        }
        if weights.len() != components.len() {
            return Err(Error::invalid(
                "weights",
                format!("{} weights for {} components", weights.len(), components.len()),
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid("weights", "weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("weights", format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { weights, components })
    }

    pub fn single(component: GaussianComponent) -> Self {
        Self { weights: vec![1.0], components: vec![component] }
    }

    /// Two-component mixture 0.35·N(-2, 0.8²) + 0.65·N(1, 1.3²).
    pub fn default_mixture() -> Self {
        Self {
            weights: vec![0.35, 0.65],
            components: vec![
                GaussianComponent { mu: -2.0, sigma: 0.8 },
                GaussianComponent { mu: 1.0, sigma: 1.3 },
            ],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.components).map(|(w, c)| w * c.mu).sum()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        mixture_pdf(self, x)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        mixture_cdf(self, x)
    }
}

pub fn mixture_pdf(spec: &TargetSpec, x: f64) -> f64 {
    spec.weights.iter().zip(&spec.components).map(|(w, c)| w * c.pdf(x)).sum()
}

pub fn mixture_cdf(spec: &TargetSpec, x: f64) -> f64 {
    let v: f64 = spec.weights.iter().zip(&spec.components).map(|(w, c)| w * c.cdf(x)).sum();
    v.clamp(0.0, 1.0)
}

/// Draws `n` i.i.d. samples: categorical component choice, then a normal draw.
pub fn sample_mixture<R: Rng + ?Sized>(spec: &TargetSpec, n: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    sample_mixture_into(spec, n, rng, &mut out);
    out
}

pub(crate) fn sample_mixture_into<R: Rng + ?Sized>(
    spec: &TargetSpec,
    n: usize,
    rng: &mut R,
    out: &mut Vec<f64>,
) {
    let last = spec.components.len() - 1;
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = last;
        for (i, w) in spec.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        let c = &spec.components[pick];
        let z: f64 = rng.sample(StandardNormal);
        out.push(c.mu + c.sigma * z);
    }
}

/// Polynomially decaying contamination `amplitude·(t + offset)^(-q)`, or a
/// constant `amplitude` when frozen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasSchedule {
    pub component: GaussianComponent,
    pub amplitude: f64,
    pub offset: f64,
    pub q: f64,
    pub frozen: bool,
}

impl BiasSchedule {
    /// N(3, 1) contamination at level 0.2·(t + 5)^(-q).
    pub fn decaying(q: f64) -> Self {
        Self {
            component: GaussianComponent { mu: 3.0, sigma: 1.0 },
            amplitude: 0.2,
            offset: 5.0,
            q,
            frozen: false,
        }
    }

    pub fn frozen(component: GaussianComponent, amplitude: f64) -> Self {
        Self { component, amplitude, offset: 0.0, q: 1.0, frozen: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.amplitude) {
            return Err(Error::invalid("amplitude", format!("must lie in [0, 1], got {}", self.amplitude)));
        }
        if !(self.offset >= 0.0 && self.offset.is_finite()) {
            return Err(Error::invalid("offset", format!("must be >= 0, got {}", self.offset)));
        }
        if !(self.q > 0.0 && self.q.is_finite()) {
            return Err(Error::invalid("q", format!("must be > 0, got {}", self.q)));
        }
        Ok(())
    }

    /// Contamination weight at iteration `t`.
    pub fn level(&self, t: u64) -> f64 {
        if self.frozen || self.amplitude == 0.0 {
            self.amplitude
        } else {
            self.amplitude * (t as f64 + self.offset).powf(-self.q)
        }
    }
}

/// The contaminated sampling distribution `(1 - b_t)·P0 + b_t·N(bias)`.
pub fn biased_spec_at(spec: &TargetSpec, sched: &BiasSchedule, t: u64) -> Result<TargetSpec> {
    let level = sched.level(t);
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::invalid("bias", format!("bias level {level} at t={t} outside [0, 1]")));
    }
    if level == 0.0 {
        return Ok(spec.clone());
    }
    let mut weights: Vec<f64> = spec.weights.iter().map(|w| w * (1.0 - level)).collect();
    weights.push(level);
    let mut components = spec.components.clone();
    components.push(sched.component);
    Ok(TargetSpec { weights, components })
}

/// Uniform evaluation grid over the effective support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    points: Vec<f64>,
    lo: f64,
    hi: f64,
}

impl EvalGrid {
    pub fn uniform(lo: f64, hi: f64, m_grid: usize) -> Result<Self> {
        if m_grid < 2 {
            return Err(Error::invalid("m_grid", format!("need at least 2 points, got {m_grid}")));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid("grid", format!("need lo < hi, got [{lo}, {hi}]")));
        }
        let step = (hi - lo) / (m_grid - 1) as f64;
        let mut points: Vec<f64> = (0..m_grid).map(|i| lo + i as f64 * step).collect();
        points[m_grid - 1] = hi;
        Ok(Self { points, lo, hi })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.points.len() - 1) as f64
    }
}

/// Grid spanning `mu ± tail_sds·sigma` over every component, including the
/// bias component when one is active.
pub fn build_grid(
    spec: &TargetSpec,
    m_grid: usize,
    tail_sds: f64,
    bias: Option<&BiasSchedule>,
) -> Result<EvalGrid> {
    if !(tail_sds > 0.0 && tail_sds.is_finite()) {
        return Err(Error::invalid("tail_sds", format!("must be > 0, got {tail_sds}")));
    }
    let comps = spec.components.iter().chain(bias.map(|b| &b.component));
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for c in comps {
        lo = lo.min(c.mu - tail_sds * c.sigma);
        hi = hi.max(c.mu + tail_sds * c.sigma);
    }
    EvalGrid::uniform(lo, hi, m_grid)
}
