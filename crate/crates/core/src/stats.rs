//! Dense statistical kernels: Gaussian fitting with covariance shrinkage,
//! Mahalanobis scoring, Pearson correlation and histogram binning.
//!
//! All accumulation is done in `f64` regardless of the stored embedding
//! precision.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

use crate::ingest::EmbeddingMatrix;

/// Shrinkage values tried, in order, by [`Shrinkage::Auto`].
pub const SHRINKAGE_LADDER: [f64; 5] = [0.0, 1e-6, 1e-4, 1e-2, 1.0];

/// A Cholesky pivot must exceed this fraction of the largest diagonal entry.
/// Rank-deficient covariances otherwise "succeed" on rounding noise.
pub const PIVOT_RTOL: f64 = 1e-12;

const COV_BLOCK_ROWS: usize = 1024;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("covariance is singular at every shrinkage level tried")]
    SingularCovariance,
    #[error("need at least 2 rows to fit a covariance, got {rows}")]
    DegenerateRows { rows: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("input has zero variance")]
    ZeroVariance,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {min} values, got {found}")]
    TooShort { min: usize, found: usize },
    #[error("histogram edges must be strictly increasing with at least 2 entries")]
    NonMonotonicEdges,
    #[error("shrinkage must be finite and non-negative, got {0}")]
    InvalidShrinkage(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Shrinkage {
    Fixed(f64),
    #[default]
    Auto,
}

/// Mean and regularized covariance factorization of a training set.
#[derive(Debug, Clone)]
pub struct GaussianModel {
    mean: Array1<f64>,
    cov: Array2<f64>,
    chol: Array2<f64>,
    shrinkage: f64,
    ridge: f64,
}

impl GaussianModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    /// Unbiased sample covariance (before shrinkage).
    pub fn cov(&self) -> &Array2<f64> {
        &self.cov
    }

    /// Lower-triangular factor of `cov + ridge·I`.
    pub fn chol(&self) -> &Array2<f64> {
        &self.chol
    }

    /// Relative shrinkage ε actually applied.
    pub fn shrinkage(&self) -> f64 {
        self.shrinkage
    }

    /// Absolute diagonal load `ε·mean(diag(cov))` added before factoring.
    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Regularized covariance `cov + ridge·I` that `chol` factors.
    pub fn regularized_cov(&self) -> Array2<f64> {
        let mut c = self.cov.clone();
        c.diag_mut().mapv_inplace(|v| v + self.ridge);
        c
    }

    /// Whitened displacement `L⁻¹(z − μ)`.
    pub fn whiten(&self, z: ArrayView1<'_, f64>) -> Result<Array1<f64>, StatsError> {
        let d = self.dim();
        if z.len() != d {
            return Err(StatsError::DimensionMismatch {
                expected: d,
                found: z.len(),
            });
        }
        let mut y = Array1::<f64>::zeros(d);
        for i in 0..d {
            let row = self.chol.row(i);
            let mut acc = z[i] - self.mean[i];
            for k in 0..i {
                acc -= row[k] * y[k];
            }
            y[i] = acc / row[i];
        }
        Ok(y)
    }
}

/// Fits mean and unbiased covariance, then factors `cov + ε·mean(diag(cov))·I`.
///
/// With [`Shrinkage::Auto`] the smallest ε from [`SHRINKAGE_LADDER`] whose
/// factorization succeeds is used. When the covariance is identically zero
/// the ridge falls back to `ε` itself so the ladder can still succeed.
pub fn fit_gaussian(train: &EmbeddingMatrix, policy: Shrinkage) -> Result<GaussianModel, StatsError> {
    fit_gaussian_view(train.data().view(), policy)
}

pub fn fit_gaussian_view(train: ArrayView2<'_, f64>, policy: Shrinkage) -> Result<GaussianModel, StatsError> {
    let (n, d) = train.dim();
    if n < 2 {
        return Err(StatsError::DegenerateRows { rows: n });
    }
    if d == 0 {
        return Err(StatsError::DimensionMismatch { expected: 1, found: 0 });
    }
    let mean = train.mean_axis(Axis(0)).expect("n >= 2");
    let cov = sample_covariance(train, &mean);

    match policy {
        Shrinkage::Fixed(eps) if !(eps.is_finite() && eps >= 0.0) => Err(StatsError::InvalidShrinkage(eps)),
        Shrinkage::Fixed(eps) => fit_with(mean, cov, &[eps]),
        Shrinkage::Auto => fit_with(mean, cov, &SHRINKAGE_LADDER),
    }
}

fn fit_with(mean: Array1<f64>, cov: Array2<f64>, ladder: &[f64]) -> Result<GaussianModel, StatsError> {
    let d = cov.nrows();
    let scale = cov.diag().sum() / d as f64;
    let scale = if scale > 0.0 { scale } else { 1.0 };
    for &eps in ladder {
        let ridge = eps * scale;
        let mut reg = cov.clone();
        reg.diag_mut().mapv_inplace(|v| v + ridge);
        if let Some(chol) = cholesky(&reg) {
            return Ok(GaussianModel {
                mean,
                cov,
                chol,
                shrinkage: eps,
                ridge,
            });
        }
    }
    Err(StatsError::SingularCovariance)
}

/// Unbiased covariance accumulated over fixed-size row blocks in order, so
/// the result is bit-stable for a given input.
fn sample_covariance(x: ArrayView2<'_, f64>, mean: &Array1<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut acc = Array2::<f64>::zeros((d, d));
    let mut start = 0;
    while start < n {
        let end = (start + COV_BLOCK_ROWS).min(n);
        let centered = &x.slice(s![start..end, ..]) - &mean.view().insert_axis(Axis(0));
        acc += &centered.t().dot(&centered);
        start = end;
    }
    acc /= (n - 1) as f64;
    (&acc + &acc.t()) * 0.5
}

/// Lower Cholesky factor, or `None` when a pivot falls below
/// `PIVOT_RTOL·max(diag)`.
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let d = a.nrows();
    let max_diag = a.diag().iter().fold(0.0f64, |m, &v| m.max(v));
    if !(max_diag > 0.0) {
        return None;
    }
    let tol = PIVOT_RTOL * max_diag;
    // row-major scratch so the inner products run over contiguous slices
    let mut l = vec![0.0f64; d * d];
    for j in 0..d {
        let (head, tail) = l.split_at_mut(j * d + d);
        let row_j = &head[j * d..j * d + j];
        let diag = a[[j, j]] - row_j.iter().map(|v| v * v).sum::<f64>();
        if !(diag > tol) {
            return None;
        }
        let ljj = diag.sqrt();
        head[j * d + j] = ljj;
        let row_j = &head[j * d..j * d + j];
        for i in (j + 1)..d {
            let off = (i - j - 1) * d;
            let row_i = &tail[off..off + j];
            let dot: f64 = row_i.iter().zip(row_j).map(|(x, y)| x * y).sum();
            tail[off + j] = (a[[i, j]] - dot) / ljj;
        }
    }
    let l = Array2::from_shape_vec((d, d), l).expect("d*d entries");
    Some(l)
}

/// `sqrt((z − μ)ᵀ Σ_reg⁻¹ (z − μ))` via forward substitution against the
/// Cholesky factor.
pub fn mahalanobis(model: &GaussianModel, z: ArrayView1<'_, f64>) -> Result<f64, StatsError> {
    let y = model.whiten(z)?;
    Ok(y.dot(&y).sqrt())
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(StatsError::TooShort { min: 2, found: x.len() });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    /// `(lo, hi, count)` per bin.
    pub fn bins(&self) -> impl Iterator<Item = (f64, f64, u64)> + '_ {
        self.edges
            .windows(2)
            .zip(&self.counts)
            .map(|(w, &c)| (w[0], w[1], c))
    }
}

/// Half-open binning `[e_i, e_{i+1})`; values below the first edge go to
/// underflow, values at or above the last edge to overflow.
pub fn histogram(scores: &[f64], edges: &[f64]) -> Result<Histogram, StatsError> {
    check_edges(edges)?;
    let mut counts = vec![0u64; edges.len() - 1];
    let (mut underflow, mut overflow) = (0, 0);
    for &v in scores {
        match bin_index(edges, v) {
            BinSlot::Under => underflow += 1,
            BinSlot::Over => overflow += 1,
            BinSlot::Bin(i) => counts[i] += 1,
        }
    }
    Ok(Histogram {
        edges: edges.to_vec(),
        counts,
        underflow,
        overflow,
    })
}

pub(crate) fn check_edges(edges: &[f64]) -> Result<(), StatsError> {
    if edges.len() < 2 || edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(StatsError::NonMonotonicEdges);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinSlot {
    Under,
    Bin(usize),
    Over,
}

pub(crate) fn bin_index(edges: &[f64], v: f64) -> BinSlot {
    // NaN compares false everywhere and lands in overflow.
    if v < edges[0] {
        return BinSlot::Under;
    }
    if !(v < edges[edges.len() - 1]) {
        return BinSlot::Over;
    }
    // first edge strictly greater than v, minus one
    let upper = edges.partition_point(|&e| e <= v);
    BinSlot::Bin(upper - 1)
}

/// `count + 1` evenly spaced edges from `lo` to `hi`.
pub fn linspace_edges(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let count = count.max(1);
    (0..=count)
        .map(|i| if i == count { hi } else { lo + (hi - lo) * i as f64 / count as f64 })
        .collect()
}

/// Linear-interpolation percentile (`q` in [0, 100]) of unsorted data.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = (q.clamp(0.0, 100.0) / 100.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Column-wise z-scoring fitted on a reference set; columns with zero
/// spread are only centered.
#[derive(Debug, Clone)]
pub struct Standardizer {
    mean: Array1<f64>,
    scale: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<'_, f64>) -> Result<Self, StatsError> {
        let n = x.nrows();
        if n < 2 {
            return Err(StatsError::DegenerateRows { rows: n });
        }
        let mean = x.mean_axis(Axis(0)).expect("n >= 2");
        let scale = x.std_axis(Axis(0), 1.0).mapv(|s| if s > 0.0 { s } else { 1.0 });
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>, StatsError> {
        if x.ncols() != self.mean.len() {
            return Err(StatsError::DimensionMismatch {
                expected: self.mean.len(),
                found: x.ncols(),
            });
        }
        Ok((&x - &self.mean.view().insert_axis(Axis(0))) / self.scale.view().insert_axis(Axis(0)))
    }
}
