//! Per-sample modality correlations and dataset-level shift vs. accuracy
//! correlations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{DatasetManifest, Modality};
use crate::shift::{ShiftHeatmap, ShiftSeries};
use crate::stats::{self, StatsError};

pub const MIN_DATASETS: usize = 3;

#[derive(Debug, Error)]
pub enum CorrelationError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("series '{0}' has zero variance")]
    ZeroVariance(&'static str),
    #[error("need at least 2 paired samples, got {0}")]
    TooShort(usize),
    #[error("empty list")]
    EmptyList,
    #[error("need at least {MIN_DATASETS} datasets with published accuracy, found {found}")]
    InsufficientDatasets { found: usize },
    #[error("heatmap has no {modality} row for method '{method}'")]
    MissingTag { modality: String, method: String },
    #[error("sample order differs at index {index}")]
    SampleOrder { index: usize },
    #[error(transparent)]
    Stats(StatsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalCorrelation {
    pub dataset_id: String,
    pub r_v_joint: f64,
    pub r_q_joint: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftPerformanceCorrelation {
    pub method: String,
    pub r_v: f64,
    pub r_q: f64,
    pub r_joint: f64,
    pub datasets_used: Vec<String>,
}

fn pearson_named(x: &[f64], y: &[f64], x_name: &'static str, y_name: &'static str) -> Result<f64, CorrelationError> {
    stats::pearson(x, y).map_err(|e| match e {
        StatsError::ZeroVariance => {
            let constant = |s: &[f64]| s.iter().all(|v| *v == s[0]);
            CorrelationError::ZeroVariance(if constant(x) { x_name } else { y_name })
        }
        StatsError::LengthMismatch { left, right } => CorrelationError::LengthMismatch { left, right },
        StatsError::TooShort { .. } => CorrelationError::TooShort(x.len().min(y.len())),
        other => CorrelationError::Stats(other),
    })
}

/// Pearson correlation of each uni-modal series with the joint series.
pub fn modal_correlation(
    v: &ShiftSeries,
    q: &ShiftSeries,
    joint: &ShiftSeries,
) -> Result<ModalCorrelation, CorrelationError> {
    for s in [v, q] {
        if s.len() != joint.len() {
            return Err(CorrelationError::LengthMismatch {
                left: s.len(),
                right: joint.len(),
            });
        }
        if let Some(index) = (0..s.len()).find(|&i| s.sample_ids[i] != joint.sample_ids[i]) {
            return Err(CorrelationError::SampleOrder { index });
        }
    }
    if joint.len() < 2 {
        return Err(CorrelationError::TooShort(joint.len()));
    }
    Ok(ModalCorrelation {
        dataset_id: joint.dataset_id.clone(),
        r_v_joint: pearson_named(&v.scores, &joint.scores, "v", "joint")?,
        r_q_joint: pearson_named(&q.scores, &joint.scores, "q", "joint")?,
        n: joint.len(),
    })
}

/// Unweighted mean of `(r_v_joint, r_q_joint)` across datasets.
pub fn average_modal_correlation(per_dataset: &[ModalCorrelation]) -> Result<(f64, f64), CorrelationError> {
    if per_dataset.is_empty() {
        return Err(CorrelationError::EmptyList);
    }
    let n = per_dataset.len() as f64;
    let v = per_dataset.iter().map(|c| c.r_v_joint).sum::<f64>() / n;
    let q = per_dataset.iter().map(|c| c.r_q_joint).sum::<f64>() / n;
    Ok((v, q))
}

/// Correlates the heatmap rows of `method` (V, Q and VQ descriptors) with the
/// manifest's published accuracies, over every column that carries one.
pub fn shift_perf_correlation(
    heatmap: &ShiftHeatmap,
    manifest: &DatasetManifest,
    method: &str,
) -> Result<ShiftPerformanceCorrelation, CorrelationError> {
    let mut cols = Vec::new();
    let mut acc = Vec::new();
    for (c, id) in heatmap.col_labels.iter().enumerate() {
        if let Some(a) = manifest.entry(id).and_then(|e| e.published_accuracy) {
            cols.push(c);
            acc.push(a);
        }
    }
    if cols.len() < MIN_DATASETS {
        return Err(CorrelationError::InsufficientDatasets { found: cols.len() });
    }
    let shifts_for = |m: Modality| -> Result<Vec<f64>, CorrelationError> {
        let r = heatmap
            .row_labels
            .iter()
            .position(|t| t.modality == m && t.training_state.method() == method)
            .ok_or_else(|| CorrelationError::MissingTag {
                modality: m.as_str().to_string(),
                method: method.to_string(),
            })?;
        Ok(cols.iter().map(|&c| heatmap.values[[r, c]]).collect())
    };
    let r = |m: Modality| -> Result<f64, CorrelationError> { pearson_named(&shifts_for(m)?, &acc, "shift", "accuracy") };
    Ok(ShiftPerformanceCorrelation {
        method: method.to_string(),
        r_v: r(Modality::V)?,
        r_q: r(Modality::Q)?,
        r_joint: r(Modality::VQ)?,
        datasets_used: cols.iter().map(|&c| heatmap.col_labels[c].clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{parse_manifest, ModalityTag, TrainingState};
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn tag(m: Modality, method: &str) -> ModalityTag {
        let state = if method == "PT" {
            TrainingState::PT
        } else {
            TrainingState::FT(method.into())
        };
        ModalityTag::new(m, "pali", state)
    }

    fn series(m: Modality, scores: Vec<f64>) -> ShiftSeries {
        ShiftSeries::from_scores("d", tag(m, "vanilla"), scores).unwrap()
    }

    fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z.abs() + 1.0
            })
            .collect()
    }

    #[test]
    fn self_correlation_is_one() {
        let v = series(Modality::V, vec![1.0, 4.0, 2.0, 8.0]);
        let q = series(Modality::Q, vec![3.0, 1.0, 2.0, 0.5]);
        let j = series(Modality::VQ, v.scores.clone());
        let c = modal_correlation(&v, &q, &j).unwrap();
        assert!((c.r_v_joint - 1.0).abs() < 1e-15);
        assert_eq!(c.n, 4);
    }

    #[test]
    fn independent_series_are_weakly_correlated() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 2000;
        let c = modal_correlation(
            &series(Modality::V, normals(&mut rng, n)),
            &series(Modality::Q, normals(&mut rng, n)),
            &series(Modality::VQ, normals(&mut rng, n)),
        )
        .unwrap();
        let bound = 3.0 / (n as f64).sqrt();
        assert!(c.r_v_joint.abs() < bound && c.r_q_joint.abs() < bound, "{c:?}");
    }

    #[test]
    fn modal_errors() {
        let v = series(Modality::V, vec![1.0, 2.0, 3.0]);
        let short = series(Modality::Q, vec![1.0, 2.0]);
        assert!(matches!(
            modal_correlation(&v, &short, &v),
            Err(CorrelationError::LengthMismatch { left: 2, right: 3 })
        ));
        let flat = series(Modality::Q, vec![2.0; 3]);
        assert!(matches!(modal_correlation(&v, &flat, &v), Err(CorrelationError::ZeroVariance("q"))));
        let mut shuffled = series(Modality::Q, vec![1.0, 3.0, 2.0]);
        shuffled.sample_ids.swap(1, 2);
        assert!(matches!(
            modal_correlation(&v, &shuffled, &v),
            Err(CorrelationError::SampleOrder { index: 1 })
        ));
        let one = series(Modality::V, vec![1.0]);
        assert!(matches!(modal_correlation(&one, &one, &one), Err(CorrelationError::TooShort(1))));
    }

    #[test]
    fn averages() {
        let mk = |v: f64, q: f64| ModalCorrelation {
            dataset_id: "x".into(),
            r_v_joint: v,
            r_q_joint: q,
            n: 10,
        };
        assert_eq!(average_modal_correlation(&[mk(0.32, 0.34)]).unwrap(), (0.32, 0.34));
        let (v, _) = average_modal_correlation(&[mk(0.2, 0.0), mk(0.4, 0.0)]).unwrap();
        assert!((v - 0.3).abs() < 1e-15);
        assert!(matches!(average_modal_correlation(&[]), Err(CorrelationError::EmptyList)));
    }

    proptest! {
        #[test]
        fn affine_invariance(seed in any::<u64>(), a in 0.1f64..50.0, b in -10.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = normals(&mut rng, 30);
            let q = normals(&mut rng, 30);
            let j: Vec<f64> = v.iter().zip(&q).map(|(x, y)| x + y + rng.random::<f64>()).collect();
            let base = modal_correlation(&series(Modality::V, v.clone()), &series(Modality::Q, q.clone()), &series(Modality::VQ, j.clone())).unwrap();
            let t = |s: &[f64]| s.iter().map(|x| a * x + b + 20.0).collect::<Vec<_>>();
            let moved = modal_correlation(&series(Modality::V, t(&v)), &series(Modality::Q, t(&q)), &series(Modality::VQ, t(&j))).unwrap();
            prop_assert!((base.r_v_joint - moved.r_v_joint).abs() < 1e-10);
            prop_assert!((base.r_q_joint - moved.r_q_joint).abs() < 1e-10);
        }

        #[test]
        fn identical_copies_average_to_themselves(v in -1.0f64..1.0, q in -1.0f64..1.0, k in 1usize..10) {
            let c = ModalCorrelation { dataset_id: "x".into(), r_v_joint: v, r_q_joint: q, n: 5 };
            let (av, aq) = average_modal_correlation(&vec![c; k]).unwrap();
            prop_assert!((av - v).abs() < 1e-15 && (aq - q).abs() < 1e-15);
        }
    }

    fn manifest_with(accuracies: &[Option<f64>]) -> (tempfile::TempDir, DatasetManifest) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("e.emb"), b"").unwrap();
        let mut datasets = vec![serde_json::json!({
            "dataset_id": "train", "role": "ID-train",
            "embedding_paths": {"V:pali:FT(vanilla)": "e.emb"},
        })];
        for (i, a) in accuracies.iter().enumerate() {
            datasets.push(serde_json::json!({
                "dataset_id": format!("d{i}"), "role": "near-OOD", "shift_type": "question",
                "embedding_paths": {"V:pali:FT(vanilla)": "e.emb"},
                "published_accuracy": a,
            }));
        }
        let text = serde_json::json!({ "datasets": datasets }).to_string();
        let m = parse_manifest(&text, dir.path()).unwrap();
        (dir, m)
    }

    fn heatmap(method: &str, rows: [Vec<f64>; 3]) -> ShiftHeatmap {
        let n = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        ShiftHeatmap {
            row_labels: vec![tag(Modality::V, method), tag(Modality::Q, method), tag(Modality::VQ, method)],
            col_labels: (0..n).map(|i| format!("d{i}")).collect(),
            values: Array2::from_shape_vec((3, n), flat).unwrap(),
        }
    }

    #[test]
    fn decreasing_accuracy_gives_minus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shift: Vec<f64> = (0..9).map(|_| rng.random_range(20.0..90.0)).collect();
        let acc: Vec<Option<f64>> = shift.iter().map(|s| Some(100.0 - s)).collect();
        let (_d, m) = manifest_with(&acc);
        let h = heatmap("vanilla", [shift.clone(), shift.clone(), shift]);
        let r = shift_perf_correlation(&h, &m, "vanilla").unwrap();
        for v in [r.r_v, r.r_q, r.r_joint] {
            assert!((v + 1.0).abs() <= 1e-12, "{v}");
        }
        assert_eq!(r.datasets_used.len(), 9);
    }

    #[test]
    fn independent_accuracy_is_weak() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 400;
        let shift: Vec<f64> = (0..n).map(|_| rng.random_range(20.0..90.0)).collect();
        let acc: Vec<Option<f64>> = (0..n).map(|_| Some(rng.random_range(0.0..100.0))).collect();
        let (_d, m) = manifest_with(&acc);
        let h = heatmap("vanilla", [shift.clone(), shift.clone(), shift]);
        let r = shift_perf_correlation(&h, &m, "vanilla").unwrap();
        assert!(r.r_v.abs() < 3.0 / (n as f64).sqrt());
    }

    #[test]
    fn insufficient_and_missing() {
        let (_d, m) = manifest_with(&[Some(50.0), None, Some(40.0)]);
        let h = heatmap("vanilla", [vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]);
        assert!(matches!(
            shift_perf_correlation(&h, &m, "vanilla"),
            Err(CorrelationError::InsufficientDatasets { found: 2 })
        ));
        let (_d, m) = manifest_with(&[Some(50.0), Some(45.0), Some(40.0)]);
        assert!(matches!(
            shift_perf_correlation(&h, &m, "spd"),
            Err(CorrelationError::MissingTag { .. })
        ));
    }
}
