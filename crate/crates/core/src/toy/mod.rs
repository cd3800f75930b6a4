//! Deterministic desk-scale fine-tuning harness on a synthetic two-modality
//! task, plus VQA-style accuracy.

mod model;
mod task;
mod train;

use thiserror::Error;

use crate::ft::FtError;

pub use model::{Dims, ToyModel, HEAD, LAYER_NAMES};
pub use task::{OodSpec, Split, SyntheticTask};
pub use train::{
    evaluate, fine_tune, pretrain, run_benchmark, train, BenchmarkRow, BenchmarkRun, BenchmarkTable, GammaTrace,
    TrainOutcome,
};

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("training diverged in epoch {epoch}: non-finite loss or weights")]
    DivergedLoss { epoch: usize },
    #[error("expected 10 human answers, got {0}")]
    WrongAnswerCount(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Ft(#[from] FtError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VqaAnswerSet {
    pub predicted: String,
    pub human_answers: Vec<String>,
}

fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

/// `min(matches / 3, 1)` against ten human answers, after lowercasing and
/// trimming.
pub fn vqa_accuracy(ans: &VqaAnswerSet) -> Result<f64, ToyError> {
    if ans.human_answers.len() != 10 {
        return Err(ToyError::WrongAnswerCount(ans.human_answers.len()));
    }
    let p = normalize(&ans.predicted);
    let n = ans.human_answers.iter().filter(|h| normalize(h) == p).count();
    Ok((n as f64 / 3.0).min(1.0))
}

pub(crate) fn answer_label(class: usize) -> String {
    format!("a{class}")
}
