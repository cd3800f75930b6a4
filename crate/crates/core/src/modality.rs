//! Modality importance (MI) from attention records.
//!
//! For token `t`, MI is the attention mass it puts on question tokens divided
//! by the mass it puts on image tokens. Values above 1 mean the text side
//! dominates. Sample-level `mi_v` / `mi_q` average token MI over the image /
//! question rows.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{AttentionRecord, IngestError};
use crate::shift::ShiftSeries;
use crate::stats::{self, BinSlot, StatsError};

/// Image-attention mass below which MI is undefined.
pub const MIN_IMAGE_MASS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MiError {
    #[error("sample '{sample_id}': token {token} puts no attention on image tokens")]
    ZeroImageAttention { sample_id: String, token: usize },
    #[error("token index {index} out of range for {n_tokens} tokens")]
    TokenOutOfRange { index: usize, n_tokens: usize },
    #[error("sample '{0}' has no shift score")]
    UnmatchedSampleId(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiResult {
    pub sample_id: String,
    pub mi_v: f64,
    pub mi_q: f64,
    pub n_image: usize,
    pub n_question: usize,
}

pub fn token_mi(rec: &AttentionRecord, token_index: usize) -> Result<f64, MiError> {
    if token_index >= rec.n_tokens() {
        return Err(MiError::TokenOutOfRange {
            index: token_index,
            n_tokens: rec.n_tokens(),
        });
    }
    let row = rec.row(token_index);
    let (img, q) = row.split_at(rec.n_image());
    let img_mass: f64 = img.iter().sum();
    let q_mass: f64 = q.iter().sum();
    if img_mass < MIN_IMAGE_MASS {
        return Err(MiError::ZeroImageAttention {
            sample_id: rec.sample_id().to_string(),
            token: token_index,
        });
    }
    Ok(q_mass / img_mass)
}

pub fn sample_mi(rec: &AttentionRecord) -> Result<MiResult, MiError> {
    let n = rec.n_image();
    let m = rec.n_question();
    let mut sum_v = 0.0;
    for t in 0..n {
        sum_v += token_mi(rec, t)?;
    }
    let mut sum_q = 0.0;
    for t in n..n + m {
        sum_q += token_mi(rec, t)?;
    }
    Ok(MiResult {
        sample_id: rec.sample_id().to_string(),
        mi_v: sum_v / n as f64,
        mi_q: sum_q / m as f64,
        n_image: n,
        n_question: m,
    })
}

/// [`sample_mi`] over many records, in input order.
pub fn sample_mi_all(records: &[AttentionRecord]) -> Result<Vec<MiResult>, MiError> {
    records.par_iter().map(sample_mi).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiShiftProfile {
    pub bin_edges: Vec<f64>,
    /// `None` for empty bins.
    pub mi_v_mean: Vec<Option<f64>>,
    pub mi_q_mean: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    /// Samples whose score lies outside `[edges[0], edges[last])`.
    pub out_of_range: usize,
}

fn score_lookup(shifts: &ShiftSeries) -> HashMap<&str, f64> {
    shifts
        .sample_ids
        .iter()
        .map(String::as_str)
        .zip(shifts.scores.iter().copied())
        .collect()
}

fn aligned_scores(results: &[MiResult], shifts: &ShiftSeries) -> Result<Vec<f64>, MiError> {
    let lookup = score_lookup(shifts);
    results
        .iter()
        .map(|r| {
            lookup
                .get(r.sample_id.as_str())
                .copied()
                .ok_or_else(|| MiError::UnmatchedSampleId(r.sample_id.clone()))
        })
        .collect()
}

/// Per-bin means of `mi_v` and `mi_q`, binning samples by their shift score
/// with half-open bins.
pub fn mi_vs_shift(results: &[MiResult], shifts: &ShiftSeries, edges: &[f64]) -> Result<MiShiftProfile, MiError> {
    stats::check_edges(edges)?;
    let scores = aligned_scores(results, shifts)?;
    let bins = edges.len() - 1;
    let mut sum_v = vec![0.0; bins];
    let mut sum_q = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    let mut out_of_range = 0;
    for (r, &s) in results.iter().zip(&scores) {
        match stats::bin_index(edges, s) {
            BinSlot::Bin(b) => {
                sum_v[b] += r.mi_v;
                sum_q[b] += r.mi_q;
                counts[b] += 1;
            }
            _ => out_of_range += 1,
        }
    }
    let mean = |sums: &[f64]| -> Vec<Option<f64>> {
        sums.iter()
            .zip(&counts)
            .map(|(s, &c)| (c > 0).then(|| s / c as f64))
            .collect()
    };
    Ok(MiShiftProfile {
        bin_edges: edges.to_vec(),
        mi_v_mean: mean(&sum_v),
        mi_q_mean: mean(&sum_q),
        counts,
        out_of_range,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiPair {
    pub mi_v: f64,
    pub mi_q: f64,
}

/// ID / OOD / overall MI means. A side with no samples is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiTable {
    pub id: Option<MiPair>,
    pub ood: Option<MiPair>,
    pub overall: Option<MiPair>,
    pub n_id: usize,
    pub n_ood: usize,
}

pub fn id_ood_mi_table(results: &[MiResult], shifts: &ShiftSeries, threshold: f64) -> Result<MiTable, MiError> {
    let scores = aligned_scores(results, shifts)?;
    let mean_of = |pick: &dyn Fn(f64) -> bool| -> (Option<MiPair>, usize) {
        let (mut v, mut q, mut n) = (0.0, 0.0, 0usize);
        for (r, &s) in results.iter().zip(&scores) {
            if pick(s) {
                v += r.mi_v;
                q += r.mi_q;
                n += 1;
            }
        }
        let pair = (n > 0).then(|| MiPair {
            mi_v: v / n as f64,
            mi_q: q / n as f64,
        });
        (pair, n)
    };
    let (id, n_id) = mean_of(&|s| s <= threshold);
    let (ood, n_ood) = mean_of(&|s| s > threshold);
    let (overall, _) = mean_of(&|_| true);
    Ok(MiTable {
        id,
        ood,
        overall,
        n_id,
        n_ood,
    })
}

/// Generator of row-stochastic attention records whose question rows shift
/// mass toward image tokens as `shift` grows.
///
/// Image rows put `image_row_q_mass` on question tokens. Question rows put
/// `question_row_q_mass / (1 + decay · shift)` on question tokens. Mass is
/// spread over tokens of each modality with random positive weights, which
/// leaves every token MI unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticAttention {
    pub n_image: usize,
    pub n_question: usize,
    pub image_row_q_mass: f64,
    pub question_row_q_mass: f64,
    pub decay: f64,
}

impl Default for SyntheticAttention {
    fn default() -> Self {
        Self {
            n_image: 8,
            n_question: 4,
            image_row_q_mass: 0.3,
            question_row_q_mass: 0.8,
            decay: 0.02,
        }
    }
}

impl SyntheticAttention {
    pub fn question_mass(&self, shift: f64) -> f64 {
        self.question_row_q_mass / (1.0 + self.decay * shift.max(0.0))
    }

    pub fn record<R: Rng + ?Sized>(&self, sample_id: &str, shift: f64, rng: &mut R) -> Result<AttentionRecord, MiError> {
        let n = self.n_image;
        let total = n + self.n_question;
        let mut attn = Vec::with_capacity(total * total);
        for t in 0..total {
            let q_mass = if t < n { self.image_row_q_mass } else { self.question_mass(shift) };
            spread(&mut attn, n, 1.0 - q_mass, rng);
            spread(&mut attn, self.n_question, q_mass, rng);
        }
        Ok(AttentionRecord::new(sample_id, n, self.n_question, attn)?)
    }
}

fn spread<R: Rng + ?Sized>(out: &mut Vec<f64>, k: usize, mass: f64, rng: &mut R) {
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = w.iter().sum();
    out.extend(w.iter().map(|x| mass * x / total));
}
