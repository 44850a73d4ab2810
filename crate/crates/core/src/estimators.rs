//! Plug-in generative estimators over an append-only sample store.
//!
//! Samples are histogrammed on a fine binning whose edges include every
//! evaluation-grid point, so the empirical CDF at grid points is exact. The
//! KDE is evaluated from linearly binned weights at bin centres; because grid
//! points sit on bin edges, the offset between grid point `i` and centre `b`
//! depends only on the integer `per_cell·i - b`, and one kernel table per
//! call serves the whole grid.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributions::{normal_cdf, normal_pdf, EvalGrid};
use crate::error::{Error, Result};
use crate::metrics::trapezoid_weights;

/// Kernel tails beyond this many bandwidths are treated as exactly 0 or 1.
const KERNEL_CUTOFF: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    /// Bandwidth-zero estimator; sampling is the plain bootstrap.
    Ecdf,
    /// Gaussian KDE with bandwidth `h0·t^(-p/2)`.
    Kde,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    pub h0: f64,
    pub p: f64,
    pub bin_count: usize,
}

impl EstimatorSpec {
    pub const DEFAULT_BIN_COUNT: usize = 800;

    pub fn ecdf(p: f64) -> Self {
        Self { kind: EstimatorKind::Ecdf, h0: 0.0, p, bin_count: Self::DEFAULT_BIN_COUNT }
    }

    pub fn kde(h0: f64, p: f64) -> Self {
        Self { kind: EstimatorKind::Kde, h0, p, bin_count: Self::DEFAULT_BIN_COUNT }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p.is_finite()) {
            return Err(Error::invalid("p", format!("must be > 0, got {}", self.p)));
        }
        match self.kind {
            EstimatorKind::Kde if !(self.h0 > 0.0 && self.h0.is_finite()) => {
                Err(Error::invalid("h0", format!("KDE needs h0 > 0, got {}", self.h0)))
            }
            EstimatorKind::Ecdf if self.h0 < 0.0 => {
                Err(Error::invalid("h0", format!("must be >= 0, got {}", self.h0)))
            }
            _ => Ok(()),
        }
    }
}

/// Bandwidth at iteration `t` (`t = 0` uses the `t = 1` value).
pub fn bandwidth_at(spec: &EstimatorSpec, t: u64) -> f64 {
    match spec.kind {
        EstimatorKind::Ecdf => 0.0,
        EstimatorKind::Kde => spec.h0 * (t.max(1) as f64).powf(-spec.p / 2.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub iteration: u64,
    pub count: usize,
    pub origin: Origin,
}

/// Fine binning of `[lo, hi]` with `per_cell` bins inside every grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Binning {
    lo: f64,
    hi: f64,
    grid_len: usize,
    per_cell: usize,
    width: f64,
}

impl Binning {
    pub fn for_grid(grid: &EvalGrid, min_bins: usize) -> Self {
        let cells = grid.len() - 1;
        let per_cell = min_bins.div_ceil(cells).max(1);
        Self {
            lo: grid.lo(),
            hi: grid.hi(),
            grid_len: grid.len(),
            per_cell,
            width: grid.spacing() / per_cell as f64,
        }
    }

    pub fn bin_count(&self) -> usize {
        self.per_cell * (self.grid_len - 1)
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn per_cell(&self) -> usize {
        self.per_cell
    }

    fn matches(&self, grid: &EvalGrid) -> bool {
        grid.len() == self.grid_len && grid.lo() == self.lo && grid.hi() == self.hi
    }

    /// Bin holding `v` under left-open bins `(e_b, e_{b+1}]`, or `None`
    /// outside `(lo, hi]`.
    fn index(&self, v: f64) -> Option<usize> {
        if !(v > self.lo && v <= self.hi) {
            return None;
        }
        let u = (v - self.lo) / self.width;
        let b = (u.ceil() as usize).saturating_sub(1);
        Some(b.min(self.bin_count() - 1))
    }
}

/// Append-only accumulation of every real and synthetic batch.
#[derive(Debug, Clone)]
pub struct SampleStore {
    values: Vec<f64>,
    batches: Vec<BatchRecord>,
    binning: Binning,
    counts: Vec<u64>,
    linear: Vec<f64>,
    below: u64,
    above: u64,
}

impl SampleStore {
    pub fn new(binning: Binning) -> Self {
        let n = binning.bin_count();
        Self {
            values: Vec::new(),
            batches: Vec::new(),
            binning,
            counts: vec![0; n],
            linear: vec![0.0; n],
            below: 0,
            above: 0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn batches(&self) -> &[BatchRecord] {
        &self.batches
    }

    pub fn bin_counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn binning(&self) -> &Binning {
        &self.binning
    }

    /// Values at or below the grid start and strictly above the grid end.
    pub fn out_of_range(&self) -> (u64, u64) {
        (self.below, self.above)
    }

    fn push(&mut self, batch: &[f64], origin: Origin, iteration: u64) {
        let nb = self.binning.bin_count();
        for &v in batch {
            match self.binning.index(v) {
                Some(b) => {
                    self.counts[b] += 1;
                    let u = (v - self.binning.lo) / self.binning.width - 0.5;
                    let b0 = u.floor();
                    if b0 < 0.0 {
                        self.linear[0] += 1.0;
                    } else if b0 as usize >= nb - 1 {
                        self.linear[nb - 1] += 1.0;
                    } else {
                        let i = b0 as usize;
                        let frac = u - b0;
                        self.linear[i] += 1.0 - frac;
                        self.linear[i + 1] += frac;
                    }
                }
                None if v > self.binning.hi => self.above += 1,
                None => self.below += 1,
            }
        }
        self.values.extend_from_slice(batch);
        self.batches.push(BatchRecord { iteration, count: batch.len(), origin });
    }
}

/// The current generator: its spec, accumulated data and bandwidth.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    spec: EstimatorSpec,
    store: SampleStore,
    t: u64,
    bandwidth: f64,
}

impl EstimatorState {
    pub fn new(spec: EstimatorSpec, grid: &EvalGrid) -> Result<Self> {
        spec.validate()?;
        if spec.bin_count < 4 * grid.len() {
            return Err(Error::invalid(
                "bin_count",
                format!("need at least 4·m_grid = {}, got {}", 4 * grid.len(), spec.bin_count),
            ));
        }
        Ok(Self {
            spec,
            store: SampleStore::new(Binning::for_grid(grid, spec.bin_count)),
            t: 0,
            bandwidth: bandwidth_at(&spec, 1),
        })
    }

    pub fn spec(&self) -> &EstimatorSpec {
        &self.spec
    }

    pub fn store(&self) -> &SampleStore {
        &self.store
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Accumulated sample count `M_t`.
    pub fn sample_count(&self) -> usize {
        self.store.len()
    }

    pub fn ingest(&mut self, batch: &[f64], origin: Origin, t: u64) -> Result<()> {
        if let Some(bad) = batch.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid("batch", format!("non-finite sample {bad}")));
        }
        if !batch.is_empty() {
            self.store.push(batch, origin, t);
        }
        self.t = t;
        self.bandwidth = bandwidth_at(&self.spec, t);
        Ok(())
    }

    fn check(&self, grid: &EvalGrid) -> Result<()> {
        if self.store.is_empty() {
            return Err(Error::NoData);
        }
        if !self.store.binning.matches(grid) {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }

    /// Estimated CDF at every grid point; exact empirical CDF for the ECDF.
    pub fn cdf_on_grid(&self, grid: &EvalGrid) -> Result<Vec<f64>> {
        self.check(grid)?;
        let total = self.store.len() as f64;
        let out = match self.spec.kind {
            EstimatorKind::Ecdf => {
                let k = self.store.binning.per_cell;
                let mut acc = self.store.below;
                let mut out = Vec::with_capacity(grid.len());
                out.push(acc as f64 / total);
                for cell in self.store.counts.chunks(k) {
                    acc += cell.iter().sum::<u64>();
                    out.push(acc as f64 / total);
                }
                out
            }
            EstimatorKind::Kde => {
                let mut out = self.kernel_sums(self.bandwidth, KernelSum::Cdf);
                for v in &mut out {
                    *v = ((*v + self.store.below as f64) / total).clamp(0.0, 1.0);
                }
                // Floating sums can wobble by an ulp; keep the output monotone.
                for i in 1..out.len() {
                    if out[i] < out[i - 1] {
                        out[i] = out[i - 1];
                    }
                }
                out
            }
        };
        Ok(out)
    }

    /// KDE density on the grid, renormalized to unit trapezoid mass.
    pub fn pdf_on_grid(&self, grid: &EvalGrid) -> Result<Vec<f64>> {
        if self.spec.kind == EstimatorKind::Ecdf {
            return Err(Error::NoDensity);
        }
        self.smoothed_pdf_on_grid(grid, self.bandwidth)
    }

    /// Gaussian-smoothed density of the stored samples at an explicit
    /// bandwidth, renormalized on the grid. Used for ECDF states, which have
    /// no density of their own.
    pub fn smoothed_pdf_on_grid(&self, grid: &EvalGrid, bandwidth: f64) -> Result<Vec<f64>> {
        self.check(grid)?;
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::invalid("bandwidth", format!("must be > 0, got {bandwidth}")));
        }
        let mut out = self.kernel_sums(bandwidth, KernelSum::Pdf);
        normalize_density(&mut out, grid);
        Ok(out)
    }

    fn kernel_sums(&self, h: f64, which: KernelSum) -> Vec<f64> {
        let binning = &self.store.binning;
        let weights = &self.store.linear;
        let nb = weights.len() as i64;
        let k = binning.per_cell as i64;
        let ratio = binning.width / h;
        let reach = (KERNEL_CUTOFF / ratio + 0.5).ceil() as i64;
        // d = k·i - b ranges over [-reach, reach]; argument (d - 1/2)·w/h
        let table: Vec<f64> = (-reach..=reach)
            .map(|d| {
                let z = (d as f64 - 0.5) * ratio;
                match which {
                    KernelSum::Cdf => normal_cdf(z),
                    KernelSum::Pdf => normal_pdf(z) / h,
                }
            })
            .collect();
        let prefix: Vec<f64> = match which {
            KernelSum::Cdf => {
                let mut p = Vec::with_capacity(weights.len() + 1);
                let mut acc = 0.0;
                p.push(0.0);
                for w in weights {
                    acc += w;
                    p.push(acc);
                }
                p
            }
            KernelSum::Pdf => Vec::new(),
        };
        (0..binning.grid_len as i64)
            .map(|i| {
                let centre = k * i;
                let b_lo = (centre - reach).max(0);
                let b_hi = (centre + reach).min(nb - 1);
                let mut s = match which {
                    // bins entirely to the left contribute full mass
                    KernelSum::Cdf => prefix[b_lo as usize],
                    KernelSum::Pdf => 0.0,
                };
                for b in b_lo..=b_hi {
                    s += weights[b as usize] * table[(centre - b + reach) as usize];
                }
                s
            })
            .collect()
    }

    /// Draws `n` samples: a uniformly chosen stored value plus `h_t·N(0,1)`.
    pub fn sample_synthetic<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<f64>> {
        let values = &self.store.values;
        if values.is_empty() {
            return Err(Error::NoData);
        }
        let h = self.bandwidth;
        let out = (0..n)
            .map(|_| {
                let v = values[rng.random_range(0..values.len())];
                if h > 0.0 {
                    let z: f64 = rng.sample(StandardNormal);
                    v + h * z
                } else {
                    v
                }
            })
            .collect();
        Ok(out)
    }
}

#[derive(Clone, Copy)]
enum KernelSum {
    Cdf,
    Pdf,
}

/// Rescales a density sampled on the grid to unit trapezoid integral.
pub fn normalize_density(values: &mut [f64], grid: &EvalGrid) {
    let mass: f64 = trapezoid_weights(grid).iter().zip(values.iter()).map(|(w, v)| w * v).sum();
    if mass > 0.0 {
        for v in values.iter_mut() {
            *v /= mass;
        }
    }
}
