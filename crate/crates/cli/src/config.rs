//! Experiment configuration: TOML (or JSON) with per-kind defaults.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crtlab_core::neuralgen::{MlpSpec, Precision, TrainSpec, DEFAULT_EVAL_SAMPLES};
use crtlab_core::{BiasSchedule, EstimatorKind, EstimatorSpec, GaussianComponent, MetricSettings, TargetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    CrtEcdf,
    CrtKde,
    CrtNeural,
    BcrtEcdf,
    BcrtKde,
    TheoryCheck,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::CrtEcdf => "crt_ecdf",
            Self::CrtKde => "crt_kde",
            Self::CrtNeural => "crt_neural",
            Self::BcrtEcdf => "bcrt_ecdf",
            Self::BcrtKde => "bcrt_kde",
            Self::TheoryCheck => "theory_check",
        }
    }

    pub fn is_biased(self) -> bool {
        matches!(self, Self::BcrtEcdf | Self::BcrtKde)
    }

    fn estimator_kind(self) -> Option<EstimatorKind> {
        match self {
            Self::CrtEcdf | Self::BcrtEcdf => Some(EstimatorKind::Ecdf),
            Self::CrtKde | Self::BcrtKde => Some(EstimatorKind::Kde),
            _ => None,
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    pub m_grid: usize,
    /// Half-width of the grid in component standard deviations.
    pub tail_sds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasParams {
    pub component: GaussianComponent,
    pub amplitude: f64,
    pub offset: f64,
    /// Constant contamination at `amplitude`, ignoring `q`.
    pub frozen: bool,
}

impl BiasParams {
    pub fn schedule(&self, q: f64) -> BiasSchedule {
        if self.frozen {
            BiasSchedule::frozen(self.component, self.amplitude)
        } else {
            BiasSchedule { component: self.component, amplitude: self.amplitude, offset: self.offset, q, frozen: false }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralParams {
    /// `m1 + m2`.
    pub total_per_iteration: usize,
    pub eval_samples: usize,
    pub target_samples: usize,
    pub precision: Precision,
    /// Iteration count used instead of `iterations` when `α ≤ extended_below_alpha`.
    pub extended_iterations: u64,
    pub extended_below_alpha: f64,
    pub mlp: MlpSpec,
    pub train: TrainSpec,
}

/// A validated experiment with every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub replicates: usize,
    pub base_seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads; 0 means one per core.
    pub workers: usize,
    pub m1: usize,
    pub iterations: u64,
    pub alphas: Vec<f64>,
    /// Bias decay rates; empty for unbiased kinds.
    pub qs: Vec<f64>,
    /// Baseline rate of the estimator.
    pub p: f64,
    pub burn_in: f64,
    pub phase_eps: f64,
    pub target: TargetSpec,
    pub grid: GridParams,
    pub estimator: EstimatorSpec,
    pub bias: Option<BiasParams>,
    pub metrics: MetricSettings,
    pub neural: Option<NeuralParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: Option<String>,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.key, self.line) {
            (Some(k), Some(l)) => write!(f, "config key `{k}` (line {l}): {}", self.message),
            (Some(k), None) => write!(f, "config key `{k}`: {}", self.message),
            (None, Some(l)) => write!(f, "config (line {l}): {}", self.message),
            (None, None) => write!(f, "config: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    kind: Option<ExperimentKind>,
    replicates: Option<usize>,
    base_seed: Option<u64>,
    output_dir: Option<PathBuf>,
    workers: Option<usize>,
    m1: Option<usize>,
    iterations: Option<u64>,
    alphas: Option<Vec<f64>>,
    qs: Option<Vec<f64>>,
    p: Option<f64>,
    burn_in: Option<f64>,
    phase_eps: Option<f64>,
    target: Option<TargetSpec>,
    grid: Option<RawGrid>,
    estimator: Option<RawEstimator>,
    bias: Option<RawBias>,
    metrics: Option<RawMetrics>,
    neural: Option<RawNeural>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    m_grid: Option<usize>,
    tail_sds: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEstimator {
    h0: Option<f64>,
    bin_count: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBias {
    mu: Option<f64>,
    sigma: Option<f64>,
    amplitude: Option<f64>,
    offset: Option<f64>,
    frozen: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMetrics {
    mmd_kernel_bandwidth: Option<f64>,
    report_squared_mmd: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNeural {
    total_per_iteration: Option<usize>,
    eval_samples: Option<usize>,
    target_samples: Option<usize>,
    precision: Option<Precision>,
    extended_iterations: Option<u64>,
    extended_below_alpha: Option<f64>,
    mlp: Option<MlpSpec>,
    train: Option<TrainSpec>,
}

/// Structured-text source of a config, kept for line lookups.
struct Source<'a> {
    text: &'a str,
}

impl Source<'_> {
    /// First line (1-based) assigning `key`, or opening a `[key]` table.
    fn line_of(&self, key: &str) -> Option<usize> {
        let leaf = key.rsplit('.').next().unwrap_or(key);
        self.text.lines().position(|l| {
            let l = l.trim_start().trim_start_matches('"');
            (l.starts_with(leaf) && l[leaf.len()..].trim_start().trim_start_matches('"').trim_start().starts_with(['=', ':']))
                || l.trim_end() == format!("[{key}]")
        })
        .map(|i| i + 1)
    }

    fn err(&self, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError { key: Some(key.to_string()), line: self.line_of(key), message: message.into() }
    }
}

fn default_alphas(kind: ExperimentKind) -> Vec<f64> {
    if kind.is_biased() {
        vec![0.25, 0.5, 0.75]
    } else {
        (1..=10).map(|i| i as f64 / 10.0).collect()
    }
}

/// The key named by a serde "unknown field" or "missing field" message.
fn offending_key(message: &str) -> Option<String> {
    let rest = message.split_once("field `")?.1;
    Some(rest.split_once('`')?.0.to_string())
}

/// Parses and validates a config. `default_kind` applies when the text has
/// no `kind` key; a conflicting `kind` is an error.
pub fn parse_config(text: &str, default_kind: Option<ExperimentKind>) -> Result<ExperimentConfig, ConfigError> {
    let src = Source { text };
    let trimmed = text.trim_start();
    let raw: RawConfig = if trimmed.starts_with('{') {
        serde_json::from_str(text).map_err(|e| {
            let message = e.to_string();
            ConfigError { key: offending_key(&message), line: Some(e.line()), message }
        })?
    } else {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            ConfigError { key: offending_key(e.message()), line, message: e.message().to_string() }
        })?
    };
    let kind = match (raw.kind, default_kind) {
        (Some(k), Some(d)) if k != d => {
            return Err(src.err("kind", format!("config is for `{k}` but the command runs `{d}`")));
        }
        (Some(k), _) | (None, Some(k)) => k,
        (None, None) => return Err(ConfigError { key: Some("kind".into()), line: None, message: "missing required key".into() }),
    };
    build(kind, raw, &src)
}

pub fn load_config(path: &Path, default_kind: Option<ExperimentKind>) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        key: None,
        line: None,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    parse_config(&text, default_kind)
}

/// Built-in defaults for `kind`.
pub fn default_config(kind: ExperimentKind) -> ExperimentConfig {
    parse_config("", Some(kind)).expect("defaults are valid")
}

fn build(kind: ExperimentKind, raw: RawConfig, src: &Source) -> Result<ExperimentConfig, ConfigError> {
    let biased = kind.is_biased();
    let neural_kind = kind == ExperimentKind::CrtNeural;
    let (def_m1, def_reps) = match kind {
        ExperimentKind::BcrtEcdf => (25, 100),
        ExperimentKind::BcrtKde => (50, 20),
        _ => (50, 50),
    };
    let def_iters = if neural_kind { 150 } else { 2000 };
    let def_h0 = match kind {
        ExperimentKind::CrtKde => 0.5,
        ExperimentKind::BcrtKde => 2.0,
        _ => 0.0,
    };

    let replicates = raw.replicates.unwrap_or(def_reps);
    if replicates == 0 {
        return Err(src.err("replicates", "must be >= 1"));
    }
    let iterations = raw.iterations.unwrap_or(def_iters);
    if iterations < 1 {
        return Err(src.err("iterations", "must be >= 1"));
    }
    let alphas = raw.alphas.unwrap_or_else(|| default_alphas(kind));
    if alphas.is_empty() {
        return Err(src.err("alphas", "sweep list must be nonempty"));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
        return Err(src.err("alphas", format!("every α must lie in (0, 1], got {a}")));
    }
    let qs = match (biased, raw.qs) {
        (true, Some(q)) => q,
        (true, None) => vec![0.25, 0.5, 0.75],
        (false, Some(_)) => return Err(src.err("qs", format!("`{kind}` takes no bias sweep"))),
        (false, None) => Vec::new(),
    };
    if biased && qs.is_empty() {
        return Err(src.err("qs", "sweep list must be nonempty"));
    }
    if let Some(q) = qs.iter().find(|q| !(**q > 0.0 && q.is_finite())) {
        return Err(src.err("qs", format!("every q must be > 0, got {q}")));
    }
    let p = raw.p.unwrap_or(0.5);
    if !(p > 0.0 && p.is_finite()) {
        return Err(src.err("p", format!("must be > 0, got {p}")));
    }
    let burn_in = raw.burn_in.unwrap_or(crtlab_core::rates::DEFAULT_BURN_IN);
    if !(0.0..1.0).contains(&burn_in) {
        return Err(src.err("burn_in", format!("must lie in [0, 1), got {burn_in}")));
    }
    let phase_eps = raw.phase_eps.unwrap_or(crtlab_core::rates::DEFAULT_PHASE_EPS);
    if !(phase_eps >= 0.0) {
        return Err(src.err("phase_eps", "must be >= 0"));
    }

    let target = raw.target.unwrap_or_else(TargetSpec::default_mixture);
    let g = raw.grid.unwrap_or_default();
    let grid = GridParams { m_grid: g.m_grid.unwrap_or(200), tail_sds: g.tail_sds.unwrap_or(6.0) };
    if grid.m_grid < 2 {
        return Err(src.err("grid.m_grid", "must be >= 2"));
    }
    if !(grid.tail_sds > 0.0 && grid.tail_sds.is_finite()) {
        return Err(src.err("grid.tail_sds", "must be > 0"));
    }

    let e = raw.estimator.unwrap_or_default();
    let mut estimator = match kind.estimator_kind() {
        Some(EstimatorKind::Kde) => EstimatorSpec::kde(e.h0.unwrap_or(def_h0), p),
        _ => {
            if e.h0.is_some() {
                return Err(src.err("estimator.h0", format!("`{kind}` has no bandwidth")));
            }
            EstimatorSpec::ecdf(p)
        }
    };
    estimator.bin_count = e.bin_count.unwrap_or(EstimatorSpec::DEFAULT_BIN_COUNT.max(4 * grid.m_grid));
    if let Err(err) = estimator.validate() {
        return Err(src.err(if matches!(err, crtlab_core::Error::InvalidParameter { name: "h0", .. }) { "estimator.h0" } else { "estimator" }, err.to_string()));
    }
    if estimator.bin_count < 4 * grid.m_grid {
        return Err(src.err("estimator.bin_count", format!("must be >= 4·m_grid = {}", 4 * grid.m_grid)));
    }

    let bias = match (biased, raw.bias) {
        (false, Some(_)) => return Err(src.err("bias", format!("`{kind}` takes no bias section"))),
        (false, None) => None,
        (true, b) => {
            let b = b.unwrap_or_default();
            let component = GaussianComponent::new(b.mu.unwrap_or(3.0), b.sigma.unwrap_or(1.0))
                .map_err(|err| src.err("bias.sigma", err.to_string()))?;
            let params = BiasParams {
                component,
                amplitude: b.amplitude.unwrap_or(0.2),
                offset: b.offset.unwrap_or(5.0),
                frozen: b.frozen.unwrap_or(false),
            };
            for &q in &qs {
                params.schedule(q).validate().map_err(|err| src.err("bias.amplitude", err.to_string()))?;
            }
            Some(params)
        }
    };

    let m = raw.metrics.unwrap_or_default();
    let metrics = MetricSettings {
        mmd_kernel_bandwidth: m.mmd_kernel_bandwidth.unwrap_or(1.0),
        report_squared_mmd: m.report_squared_mmd.unwrap_or(false),
    };
    metrics.validate().map_err(|err| src.err("metrics.mmd_kernel_bandwidth", err.to_string()))?;

    let neural = match (neural_kind, raw.neural) {
        (false, Some(_)) => return Err(src.err("neural", format!("`{kind}` takes no neural section"))),
        (false, None) => None,
        (true, n) => {
            let n = n.unwrap_or_default();
            let params = NeuralParams {
                total_per_iteration: n.total_per_iteration.unwrap_or(500),
                eval_samples: n.eval_samples.unwrap_or(DEFAULT_EVAL_SAMPLES),
                target_samples: n.target_samples.unwrap_or(DEFAULT_EVAL_SAMPLES),
                precision: n.precision.unwrap_or_default(),
                extended_iterations: n.extended_iterations.unwrap_or(200),
                extended_below_alpha: n.extended_below_alpha.unwrap_or(0.1),
                mlp: n.mlp.unwrap_or_default(),
                train: n.train.unwrap_or_default(),
            };
            if params.total_per_iteration < 2 {
                return Err(src.err("neural.total_per_iteration", "must be >= 2"));
            }
            if params.eval_samples == 0 {
                return Err(src.err("neural.eval_samples", "must be >= 1"));
            }
            if params.target_samples == 0 {
                return Err(src.err("neural.target_samples", "must be >= 1"));
            }
            params.mlp.validate().map_err(|err| src.err("neural.mlp", err.to_string()))?;
            params.train.validate().map_err(|err| src.err("neural.train", err.to_string()))?;
            for &a in &alphas {
                if (a * params.total_per_iteration as f64).round() < 1.0 {
                    return Err(src.err("alphas", format!("α = {a} leaves no real samples per iteration")));
                }
            }
            Some(params)
        }
    };

    let m1 = raw.m1.unwrap_or(def_m1);
    if m1 == 0 {
        return Err(src.err("m1", "must be >= 1"));
    }
    if neural_kind && raw.m1.is_some() {
        return Err(src.err("m1", "neural runs set m1 from neural.total_per_iteration and α"));
    }

    Ok(ExperimentConfig {
        kind,
        replicates,
        base_seed: raw.base_seed.unwrap_or(0),
        output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from("out").join(kind.name())),
        workers: raw.workers.unwrap_or(0),
        m1,
        iterations,
        alphas,
        qs,
        p,
        burn_in,
        phase_eps,
        target,
        grid,
        estimator,
        bias,
        metrics,
        neural,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_config("", Some(ExperimentKind::CrtEcdf)).unwrap();
        assert_eq!((c.m1, c.iterations, c.replicates), (50, 2000, 50));
        assert_eq!(c.alphas.len(), 10);
        assert!((c.alphas[0] - 0.1).abs() < 1e-15 && c.alphas[9] == 1.0);
        assert_eq!(c.grid.m_grid, 200);
        assert_eq!(c.estimator.kind, EstimatorKind::Ecdf);
        assert!(c.qs.is_empty() && c.bias.is_none() && c.neural.is_none());
    }

    #[test]
    fn kind_specific_defaults() {
        let c = default_config(ExperimentKind::BcrtKde);
        assert_eq!((c.estimator.h0, c.m1, c.replicates), (2.0, 50, 20));
        assert_eq!(c.qs, vec![0.25, 0.5, 0.75]);
        let c = default_config(ExperimentKind::BcrtEcdf);
        assert_eq!((c.m1, c.replicates), (25, 100));
        assert_eq!(c.bias.unwrap().amplitude, 0.2);
        let c = default_config(ExperimentKind::CrtKde);
        assert_eq!(c.estimator.h0, 0.5);
        let c = default_config(ExperimentKind::CrtNeural);
        let n = c.neural.unwrap();
        assert_eq!((c.iterations, n.total_per_iteration, n.extended_iterations), (150, 500, 200));
        assert_eq!(n.train.batch_size, 1024);
    }

    #[test]
    fn kind_from_file() {
        let c = parse_config("kind = \"bcrt_ecdf\"\nreplicates = 3\n", None).unwrap();
        assert_eq!((c.kind, c.replicates), (ExperimentKind::BcrtEcdf, 3));
        assert!(parse_config("replicates = 3", None).is_err());
        let e = parse_config("kind = \"crt_kde\"", Some(ExperimentKind::CrtEcdf)).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("kind"));
    }

    #[test]
    fn zero_alpha_rejected_with_line() {
        let e = parse_config("replicates = 2\nalphas = [0.0, 0.5]\n", Some(ExperimentKind::CrtEcdf)).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("alphas"));
        assert_eq!(e.line, Some(2));
        assert!(e.to_string().contains("alphas") && e.to_string().contains("line 2"));
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let e = parse_config("replicates = 2\n\n[grid]\nm_grid = 10\nbogus = 1\n", Some(ExperimentKind::CrtEcdf)).unwrap_err();
        assert!(e.message.contains("bogus"), "{e}");
        assert_eq!(e.line, Some(5));
        assert_eq!(e.key.as_deref(), Some("bogus"));
        assert!(e.to_string().starts_with("config key `bogus` (line 5)"), "{e}");
    }

    #[test]
    fn nested_sections() {
        let text = r#"
kind = "crt_kde"
[target]
weights = [1.0]
components = [{ mu = 0.0, sigma = 1.0 }]
[estimator]
h0 = 0.8
[metrics]
mmd_kernel_bandwidth = 0.5
"#;
        let c = parse_config(text, None).unwrap();
        assert_eq!(c.target.weights(), &[1.0]);
        assert_eq!(c.estimator.h0, 0.8);
        assert_eq!(c.metrics.mmd_kernel_bandwidth, 0.5);
    }

    #[test]
    fn json_accepted() {
        let c = parse_config(r#"{"kind": "bcrt_ecdf", "qs": [0.5], "bias": {"frozen": true}}"#, None).unwrap();
        assert_eq!(c.qs, vec![0.5]);
        assert!(c.bias.unwrap().frozen);
        let e = parse_config("{\"kind\": \"crt_ecdf\",\n \"nope\": 1}", None).unwrap_err();
        assert!(e.message.contains("nope"));
        assert_eq!(e.line, Some(2));
    }

    #[test]
    fn invalid_values() {
        let kind = Some(ExperimentKind::CrtEcdf);
        for (text, key) in [
            ("replicates = 0", "replicates"),
            ("alphas = []", "alphas"),
            ("alphas = [1.5]", "alphas"),
            ("qs = [0.5]", "qs"),
            ("p = -1.0", "p"),
            ("burn_in = 1.0", "burn_in"),
            ("[estimator]\nh0 = 1.0", "estimator.h0"),
            ("[grid]\nm_grid = 1", "grid.m_grid"),
            ("[bias]\namplitude = 0.1", "bias"),
        ] {
            let e = parse_config(text, kind).unwrap_err();
            assert_eq!(e.key.as_deref(), Some(key), "{text}: {e}");
        }
        let e = parse_config("qs = [0.0]", Some(ExperimentKind::BcrtEcdf)).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("qs"));
        let e = parse_config("[estimator]\nh0 = -1.0", Some(ExperimentKind::CrtKde)).unwrap_err();
        assert_eq!((e.key.as_deref(), e.line), (Some("estimator.h0"), Some(2)));
        let e = parse_config("[bias]\namplitude = 1.5", Some(ExperimentKind::BcrtEcdf)).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("bias.amplitude"));
    }

    #[test]
    fn config_serializes_stably() {
        let a = serde_json::to_string(&default_config(ExperimentKind::BcrtEcdf)).unwrap();
        let b = serde_json::to_string(&default_config(ExperimentKind::BcrtEcdf)).unwrap();
        assert_eq!(a, b);
    }
}
