//! Dataset-level shift pipelines: per-sample Mahalanobis scores and their
//! averages, heatmaps over (descriptor, dataset), MMD with an RBF kernel,
//! ID/OOD thresholding, OOD composition and histogram region sampling.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::ingest::{DatasetManifest, IngestError, LabeledEmbedding, ModalityTag};
use crate::stats::{self, GaussianModel, Shrinkage, StatsError};

#[derive(Debug, Error)]
pub enum ShiftError {
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("dimension mismatch: model has {expected} features, data has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("missing embedding {tag} for dataset '{dataset_id}'")]
    MissingEmbedding { tag: String, dataset_id: String },
    #[error("gamma must be positive and finite, got {0}")]
    InvalidGamma(f64),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("score {value} at index {index} is not a finite non-negative number")]
    InvalidScore { index: usize, value: f64 },
}

/// Per-sample shift scores of one dataset under one descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSeries {
    pub dataset_id: String,
    pub tag: ModalityTag,
    pub sample_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub average: f64,
}

impl ShiftSeries {
    pub fn new(
        dataset_id: impl Into<String>,
        tag: ModalityTag,
        sample_ids: Vec<String>,
        scores: Vec<f64>,
    ) -> Result<Self, ShiftError> {
        if scores.is_empty() {
            return Err(ShiftError::Empty("shift series has no scores"));
        }
        if sample_ids.len() != scores.len() {
            return Err(ShiftError::LengthMismatch {
                left: sample_ids.len(),
                right: scores.len(),
            });
        }
        if let Some((index, &value)) = scores.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(ShiftError::InvalidScore { index, value });
        }
        let average = scores.iter().sum::<f64>() / scores.len() as f64;
        Ok(Self {
            dataset_id: dataset_id.into(),
            tag,
            sample_ids,
            scores,
            average,
        })
    }

    /// Series whose sample ids are the row indices.
    pub fn from_scores(dataset_id: impl Into<String>, tag: ModalityTag, scores: Vec<f64>) -> Result<Self, ShiftError> {
        let ids = (0..scores.len()).map(|i| i.to_string()).collect();
        Self::new(dataset_id, tag, ids, scores)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Mahalanobis score of every row of `data`.
pub fn score_rows(model: &GaussianModel, data: ArrayView2<'_, f64>) -> Result<Vec<f64>, ShiftError> {
    if data.ncols() != model.dim() {
        return Err(ShiftError::DimensionMismatch {
            expected: model.dim(),
            found: data.ncols(),
        });
    }
    let rows: Vec<_> = data.outer_iter().collect();
    rows.into_par_iter()
        .map(|row| stats::mahalanobis(model, row).map_err(ShiftError::from))
        .collect()
}

pub fn score_dataset(model: &GaussianModel, test: &LabeledEmbedding) -> Result<ShiftSeries, ShiftError> {
    let scores = score_rows(model, test.matrix.data().view())?;
    ShiftSeries::new(test.dataset_id.clone(), test.tag.clone(), test.sample_ids.clone(), scores)
}

/// Average shift per (descriptor, dataset).
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftHeatmap {
    pub row_labels: Vec<ModalityTag>,
    pub col_labels: Vec<String>,
    pub values: Array2<f64>,
}

impl ShiftHeatmap {
    pub fn get(&self, tag: &ModalityTag, dataset_id: &str) -> Option<f64> {
        let r = self.row_labels.iter().position(|t| t == tag)?;
        let c = self.col_labels.iter().position(|d| d == dataset_id)?;
        Some(self.values[[r, c]])
    }

    pub fn row(&self, tag: &ModalityTag) -> Option<Vec<f64>> {
        let r = self.row_labels.iter().position(|t| t == tag)?;
        Some(self.values.row(r).to_vec())
    }
}

/// Fits one Gaussian per descriptor on the ID-train entry and scores every
/// other manifest entry. Columns follow manifest order.
pub fn build_heatmap(
    manifest: &DatasetManifest,
    tags: &[ModalityTag],
    shrinkage: Shrinkage,
) -> Result<ShiftHeatmap, ShiftError> {
    build_heatmap_with(manifest, tags, |dataset_id, tag| manifest.load_embedding(dataset_id, tag), shrinkage)
}

/// [`build_heatmap`] over an arbitrary embedding source.
pub fn build_heatmap_with<F>(
    manifest: &DatasetManifest,
    tags: &[ModalityTag],
    load: F,
    shrinkage: Shrinkage,
) -> Result<ShiftHeatmap, ShiftError>
where
    F: Fn(&str, &ModalityTag) -> Result<LabeledEmbedding, IngestError> + Sync,
{
    let train_id = manifest.id_train().dataset_id.clone();
    let cols: Vec<String> = manifest.test_entries().map(|e| e.dataset_id.clone()).collect();
    for tag in tags {
        for entry in &manifest.entries {
            if !entry.embedding_paths.contains_key(tag) {
                return Err(ShiftError::MissingEmbedding {
                    tag: tag.to_string(),
                    dataset_id: entry.dataset_id.clone(),
                });
            }
        }
    }
    let rows: Vec<Vec<f64>> = tags
        .par_iter()
        .map(|tag| -> Result<Vec<f64>, ShiftError> {
            let train = load(&train_id, tag)?;
            let model = stats::fit_gaussian(&train.matrix, shrinkage)?;
            cols.par_iter()
                .map(|id| {
                    let test = load(id, tag)?;
                    Ok(score_dataset(&model, &test)?.average)
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let mut values = Array2::zeros((tags.len(), cols.len()));
    for (r, row) in rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            values[[r, c]] = *v;
        }
    }
    Ok(ShiftHeatmap {
        row_labels: tags.to_vec(),
        col_labels: cols,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MmdEstimator {
    /// V-statistic: all pairs including the diagonal.
    #[default]
    Biased,
    /// U-statistic: within-set diagonals excluded.
    Unbiased,
}

/// `scale · MMD²` with kernel `k(a, b) = exp(−gamma·‖a − b‖²)`.
pub fn mmd_rbf(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    gamma: f64,
    scale: f64,
    estimator: MmdEstimator,
) -> Result<f64, ShiftError> {
    if x.ncols() != y.ncols() {
        return Err(ShiftError::DimensionMismatch {
            expected: x.ncols(),
            found: y.ncols(),
        });
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(ShiftError::InvalidGamma(gamma));
    }
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(ShiftError::Empty("MMD needs non-empty sample sets"));
    }
    if estimator == MmdEstimator::Unbiased && (x.nrows() < 2 || y.nrows() < 2) {
        return Err(ShiftError::Empty("unbiased MMD needs at least 2 samples per set"));
    }
    // Canonical argument order makes the statistic symmetric bit-for-bit.
    let (x, y) = if canonical_cmp(x, y) == Ordering::Greater { (y, x) } else { (x, y) };
    let kxx = kernel_mean(x, x, gamma, estimator == MmdEstimator::Unbiased);
    let kyy = kernel_mean(y, y, gamma, estimator == MmdEstimator::Unbiased);
    let kxy = kernel_mean(x, y, gamma, false);
    let mmd2 = kxx + kyy - 2.0 * kxy;
    Ok(match estimator {
        MmdEstimator::Biased => scale * mmd2.max(0.0),
        MmdEstimator::Unbiased => scale * mmd2,
    })
}

fn canonical_cmp(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Ordering {
    a.dim().cmp(&b.dim()).then_with(|| {
        a.iter()
            .zip(b.iter())
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

fn kernel_mean(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, gamma: f64, skip_diagonal: bool) -> f64 {
    let partial: Vec<f64> = (0..a.nrows())
        .into_par_iter()
        .map(|i| {
            let ai = a.row(i);
            let mut s = 0.0;
            for (j, bj) in b.outer_iter().enumerate() {
                if skip_diagonal && i == j {
                    continue;
                }
                let d2: f64 = ai.iter().zip(bj.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
                s += (-gamma * d2).exp();
            }
            s
        })
        .collect();
    let pairs = if skip_diagonal {
        a.nrows() * (a.nrows() - 1)
    } else {
        a.nrows() * b.nrows()
    };
    partial.iter().sum::<f64>() / pairs as f64
}

/// Indices with `score ≤ threshold` (ID) and `score > threshold` (OOD).
pub fn split_id_ood(series: &ShiftSeries, threshold: f64) -> (Vec<usize>, Vec<usize>) {
    let (mut id, mut ood) = (Vec::new(), Vec::new());
    for (i, &s) in series.scores.iter().enumerate() {
        if s <= threshold {
            id.push(i)
        } else {
            ood.push(i)
        }
    }
    (id, ood)
}

/// Breakdown of joint-OOD samples by their uni-modal OOD status, in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OodComposition {
    pub joint_ood: usize,
    pub pct_oodv_idq: f64,
    pub pct_idv_oodq: f64,
    pub pct_oodv_oodq: f64,
    pub pct_idv_idq: f64,
    /// Set when no sample exceeds the joint threshold; all percentages are 0.
    pub empty: bool,
}

pub fn ood_composition(
    v: &ShiftSeries,
    q: &ShiftSeries,
    joint: &ShiftSeries,
    tv: f64,
    tq: f64,
    tj: f64,
) -> Result<OodComposition, ShiftError> {
    if v.len() != joint.len() || q.len() != joint.len() {
        return Err(ShiftError::LengthMismatch {
            left: v.len().max(q.len()),
            right: joint.len(),
        });
    }
    let mut cells = [0usize; 4];
    let mut total = 0usize;
    for i in 0..joint.len() {
        if joint.scores[i] <= tj {
            continue;
        }
        total += 1;
        let ood_v = v.scores[i] > tv;
        let ood_q = q.scores[i] > tq;
        let cell = match (ood_v, ood_q) {
            (true, false) => 0,
            (false, true) => 1,
            (true, true) => 2,
            (false, false) => 3,
        };
        cells[cell] += 1;
    }
    if total == 0 {
        return Ok(OodComposition {
            joint_ood: 0,
            pct_oodv_idq: 0.0,
            pct_idv_oodq: 0.0,
            pct_oodv_oodq: 0.0,
            pct_idv_idq: 0.0,
            empty: true,
        });
    }
    let pct = |c: usize| 100.0 * c as f64 / total as f64;
    Ok(OodComposition {
        joint_ood: total,
        pct_oodv_idq: pct(cells[0]),
        pct_idv_oodq: pct(cells[1]),
        pct_oodv_oodq: pct(cells[2]),
        pct_idv_idq: pct(cells[3]),
        empty: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    LeftTail,
    Peak,
    Intersect,
    RightTail,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::LeftTail, Region::Peak, Region::Intersect, Region::RightTail];

    pub fn as_str(self) -> &'static str {
        match self {
            Region::LeftTail => "left_tail",
            Region::Peak => "peak",
            Region::Intersect => "intersect",
            Region::RightTail => "right_tail",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionSample {
    pub region: Region,
    /// Indices into the test score vector, ascending.
    pub sample_ids: Vec<usize>,
    pub k: usize,
    /// Size of the eligible population before subsampling.
    pub population: usize,
}

pub const TAIL_FRACTION: f64 = 0.05;
pub const PEAK_BINS: usize = 50;

/// Samples up to `k` test indices from each histogram region.
///
/// * left / right tail: the lowest / highest `ceil(5% · n)` test scores
/// * peak: the modal bin of a 50-bin histogram spanning the test scores
/// * intersect: test scores within the inter-quartile range of the train scores
pub fn sample_regions(
    train_scores: &[f64],
    test_scores: &[f64],
    k: usize,
    seed: u64,
) -> Result<Vec<RegionSample>, ShiftError> {
    if train_scores.is_empty() || test_scores.is_empty() {
        return Err(ShiftError::Empty("region sampling needs train and test scores"));
    }
    let n = test_scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| test_scores[a].total_cmp(&test_scores[b]).then(a.cmp(&b)));
    let tail = ((TAIL_FRACTION * n as f64).ceil() as usize).clamp(1, n);
    let left: Vec<usize> = order[..tail].to_vec();
    let right: Vec<usize> = order[n - tail..].to_vec();

    let lo = test_scores[order[0]];
    let hi = test_scores[order[n - 1]];
    let peak: Vec<usize> = if hi > lo {
        let edges = stats::linspace_edges(lo, hi, PEAK_BINS);
        let bin_of = |v: f64| match stats::bin_index(&edges, v) {
            stats::BinSlot::Bin(b) => b,
            // the maximum sits on the closing edge
            _ => PEAK_BINS - 1,
        };
        let mut counts = vec![0usize; PEAK_BINS];
        for &v in test_scores {
            counts[bin_of(v)] += 1;
        }
        let modal = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        (0..n).filter(|&i| bin_of(test_scores[i]) == modal).collect()
    } else {
        (0..n).collect()
    };

    let q25 = stats::percentile(train_scores, 25.0).unwrap();
    let q75 = stats::percentile(train_scores, 75.0).unwrap();
    let intersect: Vec<usize> = (0..n).filter(|&i| (q25..=q75).contains(&test_scores[i])).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = [
        (Region::LeftTail, left),
        (Region::Peak, peak),
        (Region::Intersect, intersect),
        (Region::RightTail, right),
    ]
    .into_iter()
    .map(|(region, pool)| {
        let population = pool.len();
        let mut picked: Vec<usize> = if population <= k {
            pool
        } else {
            sample_indices(&mut rng, population, k).into_iter().map(|i| pool[i]).collect()
        };
        picked.sort_unstable();
        RegionSample {
            region,
            sample_ids: picked,
            k,
            population,
        }
    })
    .collect();
    Ok(out)
}
