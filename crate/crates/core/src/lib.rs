//! Simulation of generative models retrained on their own output mixed
//! with fresh (possibly biased) real data, with the rate predictions and
//! numeric oracles used to check the experiments.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distributions;
pub mod error;
pub mod estimators;
pub mod metrics;
pub mod neuralgen;
pub mod rates;
pub mod recursion;
pub mod theory;

pub use distributions::{build_grid, BiasSchedule, EvalGrid, GaussianComponent, TargetSpec};
pub use error::{Error, Result};
pub use estimators::{EstimatorKind, EstimatorSpec, EstimatorState};
pub use metrics::{Evaluator, MetricSettings};
pub use neuralgen::{MlpSpec, NeuralCrtConfig, TrainSpec};
pub use rates::{Metric, RateFit, RateSummary};
pub use recursion::{RecursionConfig, Trajectory, TrajectoryPoint};
pub use theory::{predicted_rate, RatePrediction, Regime};
