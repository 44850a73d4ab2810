//! Fully connected generator `Unif(0,1) → ℝ` trained under the exact
//! quantile-W1 loss, and the recursion that re-trains it from scratch on
//! the accumulated data at every iteration.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{AddAssign, MulAssign};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, LinalgScalar};
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{sample_mixture, EvalGrid, TargetSpec};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorSpec, EstimatorState, Origin};
use crate::metrics::{w1_quantile, Evaluator};
use crate::recursion::{RecursionConfig, Trajectory, TrajectoryPoint};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpSpec {
    pub latent_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub leaky_slope: f64,
    pub out_dim: usize,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self { latent_dim: 1, hidden_width: 64, hidden_layers: 3, leaky_slope: 0.02, out_dim: 1 }
    }
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("latent_dim", self.latent_dim),
            ("hidden_width", self.hidden_width),
            ("hidden_layers", self.hidden_layers),
            ("out_dim", self.out_dim),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be >= 1"));
            }
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::invalid("leaky_slope", format!("must lie in (0, 1), got {}", self.leaky_slope)));
        }
        if self.out_dim != 1 {
            return Err(Error::invalid("out_dim", "only one-dimensional outputs are supported"));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![(self.hidden_width, self.latent_dim)];
        for _ in 1..self.hidden_layers {
            dims.push((self.hidden_width, self.hidden_width));
        }
        dims.push((self.out_dim, self.hidden_width));
        dims
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs_per_iteration: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 1e-3,
            batch_size: 1024,
            epochs_per_iteration: 25,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay", format!("must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size", format!("must be >= 2, got {}", self.batch_size)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(name, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("adam_eps", "must be > 0"));
        }
        Ok(())
    }
}

/// Floating-point type the network is stored and trained in.
pub trait Real: LinalgScalar + Float + AddAssign + MulAssign + Send + Sync + fmt::Debug {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// One affine layer with its Adam moments. `w` is `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F: Real> {
    pub w: Array2<F>,
    pub b: Array1<F>,
    mw: Array2<F>,
    vw: Array2<F>,
    mb: Array1<F>,
    vb: Array1<F>,
}

impl<F: Real> Layer<F> {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            w: Array2::zeros((out, inp)),
            b: Array1::zeros(out),
            mw: Array2::zeros((out, inp)),
            vw: Array2::zeros((out, inp)),
            mb: Array1::zeros(out),
            vb: Array1::zeros(out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpState<F: Real = f32> {
    pub spec: MlpSpec,
    pub layers: Vec<Layer<F>>,
    /// Adam steps taken.
    pub step: u64,
}

/// Parameter gradients, laid out like [`MlpState::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F: Real> {
    pub w: Vec<Array2<F>>,
    pub b: Vec<Array1<F>>,
}

impl<F: Real> MlpState<F> {
    /// All parameters zero. Test hook.
    pub fn zeroed(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layer_dims().into_iter().map(|(o, i)| Layer::zeros(o, i)).collect();
        Ok(Self { spec, layers, step: 0 })
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|x| x.is_finite()))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Diverged { step: self.step })
        }
    }
}

/// Weights `U(±√(6/fan_in))`, biases `U(±1/√fan_in)`, moments zero. Draws
/// are made in `f64`, so both precisions start from the same network.
pub fn init_mlp<F: Real, R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<MlpState<F>> {
    let mut state = MlpState::zeroed(spec)?;
    for layer in &mut state.layers {
        let fan_in = layer.w.ncols() as f64;
        let wb = (6.0 / fan_in).sqrt();
        let bb = 1.0 / fan_in.sqrt();
        layer.w.mapv_inplace(|_| F::of(rng.random_range(-wb..=wb)));
        layer.b.mapv_inplace(|_| F::of(rng.random_range(-bb..=bb)));
    }
    Ok(state)
}

pub fn leaky_relu<F: Real>(x: F, slope: F) -> F {
    if x > F::zero() {
        x
    } else {
        slope * x
    }
}

/// Activations kept for the reverse pass. `pre[l]` and `post[l]` are
/// `(batch, width_l)`; `post[L-1]` is the network output.
#[derive(Debug, Clone)]
struct Tape<F: Real> {
    input: Array2<F>,
    pre: Vec<Array2<F>>,
    post: Vec<Array2<F>>,
    delta: Vec<Array2<F>>,
}

impl<F: Real> Tape<F> {
    fn new(spec: &MlpSpec, n: usize) -> Self {
        let pre: Vec<Array2<F>> = spec.layer_dims().iter().map(|&(o, _)| Array2::zeros((n, o))).collect();
        Self { input: Array2::zeros((n, spec.latent_dim)), post: pre.clone(), delta: pre.clone(), pre }
    }

    fn output(&self) -> &[F] {
        self.post.last().expect("at least one layer").as_slice().expect("contiguous")
    }

    fn output_grad(&mut self) -> &mut [F] {
        self.delta.last_mut().expect("at least one layer").as_slice_mut().expect("contiguous")
    }
}

fn forward_tape<F: Real>(state: &MlpState<F>, tape: &mut Tape<F>) {
    let slope = F::of(state.spec.leaky_slope);
    let last = state.layers.len() - 1;
    for (l, layer) in state.layers.iter().enumerate() {
        let (before, rest) = tape.post.split_at_mut(l);
        let input: ArrayView2<F> = if l == 0 { tape.input.view() } else { before[l - 1].view() };
        let pre = &mut tape.pre[l];
        general_mat_mul(F::one(), &input, &layer.w.t(), F::zero(), pre);
        *pre += &layer.b;
        let post = &mut rest[0];
        if l == last {
            post.assign(pre);
        } else {
            post.zip_mut_with(pre, |a, &z| *a = leaky_relu(z, slope));
        }
    }
}

fn load_latents<F: Real>(state: &MlpState<F>, z: &[f64]) -> Result<Tape<F>> {
    state.check_finite()?;
    let d = state.spec.latent_dim;
    if z.len() % d != 0 {
        return Err(Error::invalid("z", format!("length {} is not a multiple of latent_dim {d}", z.len())));
    }
    if z.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("z", "latents must lie in [0, 1]"));
    }
    let mut tape = Tape::new(&state.spec, z.len() / d);
    for (dst, &src) in tape.input.iter_mut().zip(z) {
        *dst = F::of(src);
    }
    Ok(tape)
}

/// Generator outputs for latents `z` (row-major, `latent_dim` per sample).
pub fn forward<F: Real>(state: &MlpState<F>, z: &[f64]) -> Result<Vec<f64>> {
    let mut tape = load_latents(state, z)?;
    forward_tape(state, &mut tape);
    Ok(tape.output().iter().map(|v| v.f64()).collect())
}

/// Draws `n` generator samples from fresh latents.
pub fn generate<F: Real, R: Rng + ?Sized>(state: &MlpState<F>, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let z: Vec<f64> = (0..n * state.spec.latent_dim).map(|_| rng.random::<f64>()).collect();
    forward(state, &z)
}

fn cmp<F: Real>(a: F, b: F) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

/// `mean_i |g_(i) - r_(i)|` over sorted order with its subgradient in the
/// generated samples' original order. Ties get sign 0.
pub fn quantile_w1_loss_and_grad<F: Real>(generated: &[F], real: &[F]) -> Result<(f64, Vec<F>)> {
    let mut grad = vec![F::zero(); generated.len()];
    let loss = loss_grad_into(generated, real, &mut grad, &mut Vec::new(), &mut Vec::new())?;
    Ok((loss, grad))
}

fn loss_grad_into<F: Real>(
    generated: &[F],
    real: &[F],
    grad: &mut [F],
    order: &mut Vec<usize>,
    sorted_real: &mut Vec<F>,
) -> Result<f64> {
    if generated.len() != real.len() {
        return Err(Error::LengthMismatch { left: generated.len(), right: real.len() });
    }
    if generated.is_empty() {
        return Err(Error::EmptyInput);
    }
    if generated.iter().chain(real).any(|v| !v.is_finite()) {
        return Err(Error::invalid("generated", "non-finite sample"));
    }
    let n = generated.len();
    order.clear();
    order.extend(0..n);
    order.sort_unstable_by(|&a, &b| cmp(generated[a], generated[b]).then(a.cmp(&b)));
    sorted_real.clear();
    sorted_real.extend_from_slice(real);
    sorted_real.sort_unstable_by(|a, b| cmp(*a, *b));
    let step = F::of(1.0 / n as f64);
    let mut loss = 0.0;
    for (&gi, &ri) in order.iter().zip(sorted_real.iter()) {
        let diff = generated[gi] - ri;
        loss += diff.f64().abs();
        grad[gi] = if diff > F::zero() {
            step
        } else if diff < F::zero() {
            -step
        } else {
            F::zero()
        };
    }
    Ok(loss / n as f64)
}

/// Reverse pass from `dL/d output` (already on the tape's last delta).
fn backward_tape<F: Real>(state: &MlpState<F>, tape: &mut Tape<F>, grads: &mut Gradients<F>) {
    let slope = F::of(state.spec.leaky_slope);
    for l in (0..state.layers.len()).rev() {
        {
            let input: ArrayView2<F> = if l == 0 { tape.input.view() } else { tape.post[l - 1].view() };
            general_mat_mul(F::one(), &tape.delta[l].t(), &input, F::zero(), &mut grads.w[l]);
            grads.b[l] = tape.delta[l].sum_axis(Axis(0));
        }
        if l > 0 {
            let (lower, upper) = tape.delta.split_at_mut(l);
            let prev = &mut lower[l - 1];
            general_mat_mul(F::one(), &upper[0], &state.layers[l].w, F::zero(), prev);
            prev.zip_mut_with(&tape.pre[l - 1], |d, &z| {
                if z <= F::zero() {
                    *d *= slope
                }
            });
        }
    }
}

fn zero_grads<F: Real>(state: &MlpState<F>) -> Gradients<F> {
    Gradients {
        w: state.layers.iter().map(|l| Array2::zeros(l.w.raw_dim())).collect(),
        b: state.layers.iter().map(|l| Array1::zeros(l.b.len())).collect(),
    }
}

/// Quantile-W1 loss of the generator on fixed latents against `real`, and
/// its gradient with respect to every parameter.
pub fn loss_and_param_grads<F: Real>(state: &MlpState<F>, z: &[f64], real: &[f64]) -> Result<(f64, Gradients<F>)> {
    let mut tape = load_latents(state, z)?;
    if tape.input.nrows() != real.len() {
        return Err(Error::LengthMismatch { left: tape.input.nrows(), right: real.len() });
    }
    forward_tape(state, &mut tape);
    let real: Vec<F> = real.iter().map(|&r| F::of(r)).collect();
    let (loss, g) = quantile_w1_loss_and_grad(tape.output(), &real)?;
    tape.output_grad().copy_from_slice(&g);
    let mut grads = zero_grads(state);
    backward_tape(state, &mut tape, &mut grads);
    Ok((loss, grads))
}

/// One AdamW step on a flat parameter block: decoupled decay
/// `θ ← θ(1 - lr·wd)`, then the bias-corrected Adam update at step `step`
/// (1-based).
pub fn adamw_update<F: Real>(param: &mut [F], grad: &[F], m: &mut [F], v: &mut [F], step: u64, train: &TrainSpec) {
    let (b1, b2) = (F::of(train.adam_beta1), F::of(train.adam_beta2));
    let c1 = F::of(1.0 - train.adam_beta1.powf(step as f64));
    let c2 = F::of(1.0 - train.adam_beta2.powf(step as f64));
    let decay = F::of(1.0 - train.lr * train.weight_decay);
    let (lr, eps) = (F::of(train.lr), F::of(train.adam_eps));
    let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + one_b1 * g;
        v[i] = b2 * v[i] + one_b2 * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] = param[i] * decay - lr * mh / (vh.sqrt() + eps);
    }
}

fn apply_adam<F: Real>(state: &mut MlpState<F>, grads: &Gradients<F>, train: &TrainSpec) {
    state.step += 1;
    let step = state.step;
    for (l, layer) in state.layers.iter_mut().enumerate() {
        let Layer { w, b, mw, vw, mb, vb } = layer;
        adamw_update(
            w.as_slice_mut().expect("contiguous"),
            grads.w[l].as_slice().expect("contiguous"),
            mw.as_slice_mut().expect("contiguous"),
            vw.as_slice_mut().expect("contiguous"),
            step,
            train,
        );
        adamw_update(
            b.as_slice_mut().expect("contiguous"),
            grads.b[l].as_slice().expect("contiguous"),
            mb.as_slice_mut().expect("contiguous"),
            vb.as_slice_mut().expect("contiguous"),
            step,
            train,
        );
    }
}

/// `epochs_per_iteration` passes over shuffled `data` in minibatches of
/// `min(batch_size, data.len())`; a ragged final minibatch is dropped.
pub fn train_iteration<F: Real, R: Rng + ?Sized>(
    mut state: MlpState<F>,
    data: &[f64],
    train: &TrainSpec,
    rng: &mut R,
) -> Result<MlpState<F>> {
    train.validate()?;
    if data.is_empty() {
        return Err(Error::NoData);
    }
    state.check_finite()?;
    let b = train.batch_size.min(data.len());
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let mut tape = Tape::new(&state.spec, b);
    let mut grads = zero_grads(&state);
    let mut real = vec![F::zero(); b];
    let mut grad = vec![F::zero(); b];
    let (mut order, mut sorted) = (Vec::with_capacity(b), Vec::with_capacity(b));
    for _ in 0..train.epochs_per_iteration {
        idx.shuffle(rng);
        for chunk in idx.chunks_exact(b) {
            for (r, &i) in real.iter_mut().zip(chunk) {
                *r = F::of(data[i]);
            }
            for z in tape.input.iter_mut() {
                *z = F::of(rng.random::<f64>());
            }
            forward_tape(&state, &mut tape);
            if loss_grad_into(tape.output(), &real, &mut grad, &mut order, &mut sorted).is_err() {
                return Err(Error::Diverged { step: state.step });
            }
            tape.output_grad().copy_from_slice(&grad);
            backward_tape(&state, &mut tape, &mut grads);
            apply_adam(&mut state, &grads, train);
        }
        state.check_finite()?;
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralCrtConfig {
    /// `m1`, `α`, `T`, seed and metric settings; the estimator field is
    /// unused.
    pub recursion: RecursionConfig,
    pub mlp: MlpSpec,
    pub train: TrainSpec,
    /// Generated samples per evaluation.
    pub eval_samples: usize,
    /// Size of the fixed reference sample drawn from the target.
    pub target_samples: usize,
    pub precision: Precision,
}

pub const DEFAULT_EVAL_SAMPLES: usize = 20_000;

impl NeuralCrtConfig {
    pub fn new(recursion: RecursionConfig) -> Self {
        Self {
            recursion,
            mlp: MlpSpec::default(),
            train: TrainSpec::default(),
            eval_samples: DEFAULT_EVAL_SAMPLES,
            target_samples: DEFAULT_EVAL_SAMPLES,
            precision: Precision::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.recursion.validate()?;
        self.mlp.validate()?;
        self.train.validate()?;
        if self.eval_samples == 0 || self.target_samples == 0 {
            return Err(Error::invalid("eval_samples", "evaluation sample sizes must be >= 1"));
        }
        Ok(())
    }
}

/// Splits the reference-sample stream from the training stream.
const TARGET_STREAM: u64 = 0x7a11_5eed_0f0e_1e75;

/// Neural recursion in progress. An iteration is [`NeuralCrt::synthesize`]
/// followed by [`NeuralCrt::retrain`].
#[derive(Debug, Clone)]
pub struct NeuralCrt<F: Real = f32> {
    config: NeuralCrtConfig,
    target: TargetSpec,
    grid: EvalGrid,
    evaluator: Evaluator,
    reference: Vec<f64>,
    rng: ChaCha8Rng,
    data: Vec<f64>,
    model: MlpState<F>,
    t: u64,
    points: Vec<TrajectoryPoint>,
}

impl<F: Real> NeuralCrt<F> {
    /// Trains the first generator on `m1` real draws and records `t = 0`.
    pub fn start(config: NeuralCrtConfig, target: &TargetSpec, grid: &EvalGrid) -> Result<Self> {
        config.validate()?;
        if config.recursion.bias.is_some() {
            return Err(Error::invalid("bias", "the neural recursion takes no bias schedule"));
        }
        let mut ref_rng = ChaCha8Rng::seed_from_u64(config.recursion.seed ^ TARGET_STREAM);
        let reference = sample_mixture(target, config.target_samples, &mut ref_rng);
        let evaluator = Evaluator::new(target, grid, &config.recursion.metric_settings)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.recursion.seed);
        let data = sample_mixture(target, config.recursion.m1, &mut rng);
        let model = MlpState::zeroed(config.mlp)?;
        let mut run = Self {
            config,
            target: target.clone(),
            grid: grid.clone(),
            evaluator,
            reference,
            rng,
            data,
            model,
            t: 0,
            points: Vec::new(),
        };
        run.fit_fresh()?;
        run.record()?;
        Ok(run)
    }

    fn fit_fresh(&mut self) -> Result<()> {
        let fresh = init_mlp(self.config.mlp, &mut self.rng)?;
        self.model = train_iteration(fresh, &self.data, &self.config.train, &mut self.rng)?;
        Ok(())
    }

    fn record(&mut self) -> Result<()> {
        let eval = generate(&self.model, self.config.eval_samples, &mut self.rng)?;
        let w1 = w1_quantile(&eval, &self.reference)?;
        let mut state = EstimatorState::new(EstimatorSpec::ecdf(0.5), &self.grid)?;
        state.ingest(&eval, Origin::Synthetic, self.t)?;
        let (_, mmd) = self.evaluator.evaluate(&state)?;
        self.points.push(TrajectoryPoint { t: self.t, m_t: self.data.len() as u64, w1, mmd, bias_level: 0.0 });
        Ok(())
    }

    /// The `m2` synthetic draws from the current generator.
    pub fn synthesize(&mut self) -> Result<Vec<f64>> {
        generate(&self.model, self.config.recursion.m2(), &mut self.rng)
    }

    /// Draws the real batch, accumulates, re-initializes, trains and records.
    pub fn retrain(&mut self, synthetic: Vec<f64>) -> Result<()> {
        let real = sample_mixture(&self.target, self.config.recursion.m1, &mut self.rng);
        self.data.extend_from_slice(&synthetic);
        self.data.extend_from_slice(&real);
        self.t += 1;
        self.fit_fresh()?;
        self.record()
    }

    pub fn step(&mut self) -> Result<()> {
        let synthetic = self.synthesize()?;
        self.retrain(synthetic)
    }

    pub fn run_to_end(mut self) -> Result<Trajectory> {
        while self.t < self.config.recursion.iterations {
            self.step()?;
        }
        Ok(Trajectory { config: self.config.recursion, points: self.points })
    }

    pub fn model(&self) -> &MlpState<F> {
        &self.model
    }

    /// Mutable access to the current generator. Test hook.
    pub fn model_mut(&mut self) -> &mut MlpState<F> {
        &mut self.model
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn points(&self) -> &[TrajectoryPoint] {
        &self.points
    }

    pub fn t(&self) -> u64 {
        self.t
    }
}

/// Runs the neural recursion in the configured precision.
pub fn run_crt_neural(config: NeuralCrtConfig, target: &TargetSpec, grid: &EvalGrid) -> Result<Trajectory> {
    match config.precision {
        Precision::F32 => NeuralCrt::<f32>::start(config, target, grid)?.run_to_end(),
        Precision::F64 => NeuralCrt::<f64>::start(config, target, grid)?.run_to_end(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{build_grid, GaussianComponent};

    fn small_spec() -> MlpSpec {
        MlpSpec { hidden_width: 8, ..MlpSpec::default() }
    }

    #[test]
    fn init_contract() {
        let spec = MlpSpec::default();
        let a = init_mlp::<f64, _>(spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = init_mlp::<f64, _>(spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.parameter_count(), 64 * 2 + 2 * 64 * 65 + 65);
        for l in &a.layers {
            let bound = (6.0 / l.w.ncols() as f64).sqrt();
            assert!(l.w.iter().all(|w| w.abs() <= bound));
        }
        let z = MlpState::<f64>::zeroed(spec).unwrap();
        let out = forward(&z, &[0.0, 0.3, 0.9, 1.0]).unwrap();
        assert!(out.iter().all(|&o| o == out[0]));
    }

    #[test]
    fn identity_path() {
        let mut s = MlpState::<f64>::zeroed(MlpSpec::default()).unwrap();
        for l in &mut s.layers {
            l.w[[0, 0]] = 1.0;
        }
        let z = [0.0, 0.25, 0.5, 1.0];
        assert_eq!(forward(&s, &z).unwrap(), z.to_vec());
        assert_eq!(leaky_relu(-1.0f64, 0.02), -0.02);
        assert_eq!(leaky_relu(-1.0f32, 0.02), -0.02);
    }

    #[test]
    fn batch_equals_loop() {
        let s = init_mlp::<f64, _>(MlpSpec::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z: Vec<f64> = (0..37).map(|_| rng.random()).collect();
        let batch = forward(&s, &z).unwrap();
        for (i, &zi) in z.iter().enumerate() {
            // independent scalar forward pass
            let mut h = vec![zi];
            for (l, layer) in s.layers.iter().enumerate() {
                let mut next = vec![0.0; layer.w.nrows()];
                for (o, n) in next.iter_mut().enumerate() {
                    *n = layer.b[o] + (0..h.len()).map(|k| layer.w[[o, k]] * h[k]).sum::<f64>();
                    if l + 1 < s.layers.len() {
                        *n = leaky_relu(*n, 0.02);
                    }
                }
                h = next;
            }
            assert!((h[0] - batch[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn nonfinite_parameters_rejected() {
        let mut s = MlpState::<f64>::zeroed(MlpSpec::default()).unwrap();
        s.layers[1].b[3] = f64::NAN;
        assert!(matches!(forward(&s, &[0.5]), Err(Error::Diverged { .. })));
        assert!(forward(&MlpState::<f64>::zeroed(MlpSpec::default()).unwrap(), &[1.5]).is_err());
    }

    #[test]
    fn loss_examples() {
        let (l, g) = quantile_w1_loss_and_grad::<f64>(&[0.3, -1.0, 2.0], &[2.0, 0.3, -1.0]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0; 3]);
        let (l, g) = quantile_w1_loss_and_grad::<f64>(&[0.0, 0.0], &[1.0, 3.0]).unwrap();
        assert_eq!(l, 2.0);
        assert_eq!(g, vec![-0.5, -0.5]);
        let (_, g) = quantile_w1_loss_and_grad::<f64>(&[5.0, -5.0], &[0.0, 1.0]).unwrap();
        assert_eq!(g, vec![0.5, -0.5]);
        assert!(quantile_w1_loss_and_grad::<f64>(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn loss_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps = 1e-7;
        for _ in 0..50 {
            let n = rng.random_range(2..20);
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (_, grad) = quantile_w1_loss_and_grad(&g, &r).unwrap();
            for i in 0..n {
                let mut up = g.clone();
                let mut dn = g.clone();
                up[i] += eps;
                dn[i] -= eps;
                let fd = (quantile_w1_loss_and_grad(&up, &r).unwrap().0
                    - quantile_w1_loss_and_grad(&dn, &r).unwrap().0)
                    / (2.0 * eps);
                assert!((fd - grad[i]).abs() < 1e-5, "{fd} vs {}", grad[i]);
            }
        }
    }

    fn loss_at(s: &MlpState<f64>, z: &[f64], real: &[f64]) -> f64 {
        let out = forward(s, z).unwrap();
        quantile_w1_loss_and_grad(&out, real).unwrap().0
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let s = init_mlp::<f64, _>(MlpSpec::default(), &mut rng).unwrap();
        let z: Vec<f64> = (0..24).map(|_| rng.random()).collect();
        let real: Vec<f64> = (0..24).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (_, grads) = loss_and_param_grads(&s, &z, &real).unwrap();
        let eps = 1e-6;
        for l in 0..s.layers.len() {
            for _ in 0..10 {
                let (o, i) = (rng.random_range(0..s.layers[l].w.nrows()), rng.random_range(0..s.layers[l].w.ncols()));
                let mut up = s.clone();
                let mut dn = s.clone();
                up.layers[l].w[[o, i]] += eps;
                dn.layers[l].w[[o, i]] -= eps;
                let fd = (loss_at(&up, &z, &real) - loss_at(&dn, &z, &real)) / (2.0 * eps);
                let g = grads.w[l][[o, i]];
                assert!((fd - g).abs() <= 1e-4 * fd.abs().max(g.abs()).max(1e-8), "layer {l} w[{o},{i}]: {fd} vs {g}");
            }
            let o = rng.random_range(0..s.layers[l].b.len());
            let mut up = s.clone();
            let mut dn = s.clone();
            up.layers[l].b[o] += eps;
            dn.layers[l].b[o] -= eps;
            let fd = (loss_at(&up, &z, &real) - loss_at(&dn, &z, &real)) / (2.0 * eps);
            let g = grads.b[l][o];
            assert!((fd - g).abs() <= 1e-4 * fd.abs().max(g.abs()).max(1e-8), "layer {l} b[{o}]: {fd} vs {g}");
        }
    }

    #[test]
    fn scalar_adam_oracle() {
        let train = TrainSpec { lr: 0.1, weight_decay: 0.01, ..TrainSpec::default() };
        let (mut p, mut m, mut v) = ([1.5], [0.0], [0.0]);
        let grads = [0.4, -0.2, 0.7];
        let (mut rp, mut rm, mut rv) = (1.5f64, 0.0f64, 0.0f64);
        for (k, &g) in grads.iter().enumerate() {
            let step = k as u64 + 1;
            adamw_update(&mut p, &[g], &mut m, &mut v, step, &train);
            rp *= 1.0 - 0.1 * 0.01;
            rm = 0.9 * rm + 0.1 * g;
            rv = 0.999 * rv + 0.001 * g * g;
            let mh = rm / (1.0 - 0.9f64.powi(step as i32));
            let vh = rv / (1.0 - 0.999f64.powi(step as i32));
            rp -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((p[0] - rp).abs() < 1e-12);
        }
        // first step moves by lr·sign(g) up to eps and decay
        let (mut p, mut m, mut v) = ([0.0], [0.0], [0.0]);
        adamw_update(&mut p, &[3.0], &mut m, &mut v, 1, &train);
        assert!((p[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn zero_learning_rate() {
        let data: Vec<f64> = (0..300).map(|i| i as f64 / 100.0).collect();
        let s = init_mlp::<f64, _>(small_spec(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let train = TrainSpec { lr: 0.0, weight_decay: 0.0, epochs_per_iteration: 2, batch_size: 64, ..TrainSpec::default() };
        let out = train_iteration(s.clone(), &data, &train, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for (a, b) in out.layers.iter().zip(&s.layers) {
            assert_eq!(a.w, b.w);
            assert_eq!(a.b, b.b);
        }
        assert_eq!(out.step, 8);
    }

    #[test]
    fn training_is_deterministic() {
        let data: Vec<f64> = (0..500).map(|i| (i as f64 * 0.37).sin()).collect();
        let train = TrainSpec { epochs_per_iteration: 3, batch_size: 128, ..TrainSpec::default() };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let s = init_mlp::<f64, _>(MlpSpec::default(), &mut rng).unwrap();
            train_iteration(s, &data, &train, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn small_data_uses_one_batch() {
        let s = init_mlp::<f64, _>(small_spec(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let train = TrainSpec { epochs_per_iteration: 4, ..TrainSpec::default() };
        let out = train_iteration(s, &[0.1, 0.2, 0.3], &train, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(out.step, 4);
        assert!(train_iteration(out, &[], &train, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }

    #[test]
    fn learns_a_shifted_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let teacher = TargetSpec::single(GaussianComponent::new(2.0, 0.25).unwrap());
        let data = sample_mixture(&teacher, 10_000, &mut rng);
        let train = TrainSpec { epochs_per_iteration: 200, ..TrainSpec::default() };
        let s = init_mlp::<f64, _>(MlpSpec::default(), &mut rng).unwrap();
        let s = train_iteration(s, &data, &train, &mut rng).unwrap();
        let out = generate(&s, 20_000, &mut rng).unwrap();
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        assert!((mean - 2.0).abs() < 0.1, "mean {mean}");
    }

    fn tiny_config(alpha: f64, iterations: u64, seed: u64) -> NeuralCrtConfig {
        let m1 = (alpha * 100.0).round() as usize;
        let mut c = NeuralCrtConfig::new(RecursionConfig::new(m1, alpha, iterations, EstimatorSpec::ecdf(0.5), seed));
        c.mlp = small_spec();
        c.train = TrainSpec { epochs_per_iteration: 2, batch_size: 64, ..TrainSpec::default() };
        c.eval_samples = 500;
        c.target_samples = 500;
        c
    }

    fn setup() -> (TargetSpec, EvalGrid) {
        let target = TargetSpec::default_mixture();
        let grid = build_grid(&target, 200, 6.0, None).unwrap();
        (target, grid)
    }

    #[test]
    fn batch_composition() {
        let (target, grid) = setup();
        let mut c = tiny_config(0.5, 2, 1);
        c.recursion.m1 = 250;
        assert_eq!(c.recursion.m2(), 250);
        let mut run = NeuralCrt::<f32>::start(c, &target, &grid).unwrap();
        assert_eq!(run.data().len(), 250);
        let syn = run.synthesize().unwrap();
        assert_eq!(syn.len(), 250);
        run.retrain(syn).unwrap();
        assert_eq!(run.data().len(), 750);
        assert_eq!(run.points()[1].m_t, 750);
    }

    #[test]
    fn neural_run_is_deterministic() {
        let (target, grid) = setup();
        let a = run_crt_neural(tiny_config(0.5, 3, 7), &target, &grid).unwrap();
        let b = run_crt_neural(tiny_config(0.5, 3, 7), &target, &grid).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.points.len(), 4);
        assert!(a.points.iter().all(|p| p.w1 >= 0.0 && p.mmd >= 0.0));
    }

    #[test]
    fn retraining_forgets_previous_parameters() {
        let (target, grid) = setup();
        let mut clean = NeuralCrt::<f32>::start(tiny_config(0.5, 2, 3), &target, &grid).unwrap();
        let mut poked = clean.clone();
        let syn_a = clean.synthesize().unwrap();
        let syn_b = poked.synthesize().unwrap();
        assert_eq!(syn_a, syn_b);
        poked.model_mut().layers[0].w[[0, 0]] += 10.0;
        poked.model_mut().layers[3].b[0] -= 5.0;
        clean.retrain(syn_a).unwrap();
        poked.retrain(syn_b).unwrap();
        assert_eq!(clean.model(), poked.model());
        assert_eq!(clean.points(), poked.points());
    }
}
