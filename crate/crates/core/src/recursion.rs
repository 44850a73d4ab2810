//! Contaminated recursive training loops, plain and with a biased real-data
//! stream.
//!
//! At step `t ≥ 1` the synthetic batch is drawn from the estimator as it
//! stood after step `t - 1`, then the real batch is drawn, then both are
//! accumulated and the bandwidth is advanced.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{biased_spec_at, sample_mixture_into, BiasSchedule, EvalGrid, TargetSpec};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorSpec, EstimatorState, Origin};
use crate::metrics::{Evaluator, MetricSettings};

/// Synthetic batch size `round(m1·(1 - α)/α)`.
pub fn m2_of(m1: usize, alpha: f64) -> Result<usize> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid("alpha", format!("must lie in (0, 1], got {alpha}")));
    }
    Ok((m1 as f64 * (1.0 - alpha) / alpha).round() as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecursionConfig {
    pub m1: usize,
    pub alpha: f64,
    pub iterations: u64,
    pub estimator: EstimatorSpec,
    pub bias: Option<BiasSchedule>,
    pub seed: u64,
    pub metric_settings: MetricSettings,
}

impl RecursionConfig {
    pub fn new(m1: usize, alpha: f64, iterations: u64, estimator: EstimatorSpec, seed: u64) -> Self {
        Self {
            m1,
            alpha,
            iterations,
            estimator,
            bias: None,
            seed,
            metric_settings: MetricSettings::default(),
        }
    }

    pub fn with_bias(mut self, bias: BiasSchedule) -> Self {
        self.bias = Some(bias);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.m1 == 0 {
            return Err(Error::invalid("m1", "must be >= 1"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations", "must be >= 1"));
        }
        m2_of(self.m1, self.alpha)?;
        self.estimator.validate()?;
        self.metric_settings.validate()?;
        if let Some(b) = &self.bias {
            b.validate()?;
        }
        Ok(())
    }

    pub fn m2(&self) -> usize {
        m2_of(self.m1, self.alpha).unwrap_or(0)
    }

    /// `m1/(m1 + m2)` after integer rounding of `m2`.
    pub fn effective_alpha(&self) -> f64 {
        self.m1 as f64 / (self.m1 + self.m2()) as f64
    }

    /// `(t + 1)·m1 + t·m2`.
    pub fn accumulated_at(&self, t: u64) -> u64 {
        (t + 1) * self.m1 as u64 + t * self.m2() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: u64,
    pub m_t: u64,
    pub w1: f64,
    pub mmd: f64,
    pub bias_level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub config: RecursionConfig,
    pub points: Vec<TrajectoryPoint>,
}

/// A recursion in progress. [`Recursion::step`] advances one iteration;
/// the loop helpers drive it to completion.
#[derive(Debug, Clone)]
pub struct Recursion {
    config: RecursionConfig,
    target: TargetSpec,
    state: EstimatorState,
    evaluator: Evaluator,
    rng: ChaCha8Rng,
    points: Vec<TrajectoryPoint>,
    buf: Vec<f64>,
}

impl Recursion {
    /// Draws `X0`, trains the initial estimator and records `t = 0`.
    pub fn start(config: RecursionConfig, target: &TargetSpec, grid: &EvalGrid) -> Result<Self> {
        config.validate()?;
        let state = EstimatorState::new(config.estimator, grid)?;
        let evaluator = Evaluator::new(target, grid, &config.metric_settings)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut run = Self {
            config,
            target: target.clone(),
            state,
            evaluator,
            rng,
            points: Vec::new(),
            buf: Vec::new(),
        };
        let level = run.draw_real(0)?;
        run.state.ingest(&run.buf, Origin::Real, 0)?;
        run.record(level)?;
        Ok(run)
    }

    fn draw_real(&mut self, t: u64) -> Result<f64> {
        self.buf.clear();
        match &self.config.bias {
            None => {
                sample_mixture_into(&self.target, self.config.m1, &mut self.rng, &mut self.buf);
                Ok(0.0)
            }
            Some(bias) => {
                let spec = biased_spec_at(&self.target, bias, t)?;
                sample_mixture_into(&spec, self.config.m1, &mut self.rng, &mut self.buf);
                Ok(bias.level(t))
            }
        }
    }

    fn record(&mut self, bias_level: f64) -> Result<()> {
        let (w1, mmd) = self.evaluator.evaluate(&self.state)?;
        self.points.push(TrajectoryPoint {
            t: self.state.t(),
            m_t: self.state.sample_count() as u64,
            w1,
            mmd,
            bias_level,
        });
        Ok(())
    }

    pub fn step(&mut self) -> Result<()> {
        let t = self.state.t() + 1;
        let synthetic = self.state.sample_synthetic(self.config.m2(), &mut self.rng)?;
        let level = self.draw_real(t)?;
        self.state.ingest(&synthetic, Origin::Synthetic, t)?;
        self.state.ingest(&self.buf, Origin::Real, t)?;
        self.record(level)
    }

    pub fn run_to_end(mut self) -> Result<(Trajectory, EstimatorState)> {
        while self.state.t() < self.config.iterations {
            self.step()?;
        }
        Ok((Trajectory { config: self.config, points: self.points }, self.state))
    }

    pub fn state(&self) -> &EstimatorState {
        &self.state
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn points(&self) -> &[TrajectoryPoint] {
        &self.points
    }

    pub fn config(&self) -> &RecursionConfig {
        &self.config
    }
}

/// Contaminated recursive training against `target`.
pub fn run_crt(config: RecursionConfig, target: &TargetSpec, grid: &EvalGrid) -> Result<Trajectory> {
    if config.bias.is_some() {
        return Err(Error::invalid("bias", "run_crt takes no bias schedule; use run_bcrt"));
    }
    Ok(Recursion::start(config, target, grid)?.run_to_end()?.0)
}

/// Biased variant: real draws follow the contaminated stream, metrics are
/// always taken against the unbiased `target`.
pub fn run_bcrt(config: RecursionConfig, target: &TargetSpec, grid: &EvalGrid) -> Result<Trajectory> {
    if config.bias.is_none() {
        return Err(Error::invalid("bias", "run_bcrt needs a bias schedule"));
    }
    Ok(Recursion::start(config, target, grid)?.run_to_end()?.0)
}
