use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{ToyModel, HEAD};
use super::task::{Split, SyntheticTask};
use super::{answer_label, vqa_accuracy, ToyError, VqaAnswerSet};
use crate::ft::{self, LayerState, Method, MethodConfig};

const SHUFFLE_STREAM: u64 = 50;
const INIT_STREAM: u64 = 51;

/// Radius and deviation of one layer, sampled at the end of every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaTrace {
    pub layer: String,
    pub gamma: Vec<f64>,
    pub deviation: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub config: MethodConfig,
    pub model: ToyModel,
    pub id_acc: f64,
    pub ood_acc: Vec<(String, f64)>,
    pub gamma_history: Vec<GammaTrace>,
    pub loss_history: Vec<f64>,
    /// Largest `‖θ − θ0‖ / γ` seen after any step on a constrained layer.
    pub max_constraint_ratio: f64,
}

impl TrainOutcome {
    pub fn ood_avg(&self) -> f64 {
        mean(self.ood_acc.iter().map(|(_, a)| *a))
    }

    pub fn total_deviation(&self) -> f64 {
        self.model.layers.iter().map(LayerState::deviation_norm).sum()
    }

    pub fn max_deviation(&self) -> f64 {
        self.model
            .layers
            .iter()
            .map(LayerState::deviation_norm)
            .fold(0.0, f64::max)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Mean VQA accuracy of the model on a split, in percent.
pub fn evaluate(model: &ToyModel, split: &Split) -> f64 {
    let pred = model.predict(split.v.view(), split.q.view());
    let total: f64 = pred
        .iter()
        .zip(&split.answers)
        .map(|(&p, answers)| {
            let set = VqaAnswerSet {
                predicted: answer_label(p),
                human_answers: answers.iter().map(|&a| answer_label(a)).collect(),
            };
            vqa_accuracy(&set).expect("ten answers")
        })
        .sum();
    100.0 * total / split.len() as f64
}

fn sgd_epochs(model: &mut ToyModel, data: &Split, epochs: usize, lr: f64, batch: usize, rng: &mut ChaCha8Rng) -> Result<(), ToyError> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(rng);
        for idx in order.chunks(batch) {
            let (v, q, y) = data.rows(idx);
            let (loss, grads) = model.loss_and_grad(v.view(), q.view(), &y);
            if !loss.is_finite() {
                return Err(ToyError::DivergedLoss { epoch });
            }
            for (layer, g) in model.layers.iter_mut().zip(&grads) {
                layer.theta.scaled_add(-lr, g);
            }
            if !all_finite(model) {
                return Err(ToyError::DivergedLoss { epoch });
            }
        }
    }
    Ok(())
}

/// Trains a fresh model on the pre-training distribution and anchors every
/// layer's reference point at the result.
pub fn pretrain(task: &SyntheticTask) -> Result<ToyModel, ToyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    rng.set_stream(INIT_STREAM);
    let mut model = ToyModel::init(task.dims, &mut rng);
    let data = task.pretrain_split();
    sgd_epochs(&mut model, &data, task.pretrain_epochs, task.pretrain_lr, task.batch_size, &mut rng)?;
    model.anchor();
    Ok(model)
}

fn all_finite(model: &ToyModel) -> bool {
    model.layers.iter().all(|l| l.theta.iter().all(|v| v.is_finite()))
}

fn project_or_freeze(layer: &mut LayerState) {
    if layer.gamma <= 0.0 {
        layer.theta = layer.theta0.clone();
    } else {
        layer.theta = ft::pgm_project(layer).expect("gamma checked");
    }
}

fn decay_toward_anchor(layer: &mut LayerState, factor: f64) {
    let shrunk = &layer.theta0 + &((&layer.theta - &layer.theta0) / factor);
    layer.theta = shrunk;
}

/// Fine-tunes a copy of `pretrained` with plain mini-batch gradient descent
/// and the hooks of `cfg.method`, then scores the ID test split and every OOD
/// split.
pub fn fine_tune(
    task: &SyntheticTask,
    pretrained: &ToyModel,
    cfg: &MethodConfig,
    epochs: usize,
    lr: f64,
) -> Result<TrainOutcome, ToyError> {
    cfg.validate()?;
    if epochs == 0 {
        return Err(ToyError::InvalidArgument("epochs must be at least 1".into()));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(ToyError::InvalidArgument(format!("learning rate {lr}")));
    }
    let train = task.train_split();
    let val = task.val_split();
    let mut model = pretrained.clone();
    let n_layers = model.layers.len();
    let method = cfg.method;
    if matches!(method, Method::TPGM | Method::FTP) {
        for l in &mut model.layers {
            l.gamma = ft::initial_gamma(l.theta0.len());
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let val_batches: Vec<Vec<usize>> = (0..val.len())
        .collect::<Vec<_>>()
        .chunks(task.batch_size)
        .map(<[usize]>::to_vec)
        .collect();
    let mut val_cursor = 0;
    let mut ftp_prev: Vec<Option<Array1<f64>>> = vec![None; n_layers];
    let mut max_ratio: f64 = 0.0;
    let mut loss_history = Vec::with_capacity(epochs);
    let mut gamma_history: Vec<GammaTrace> = model
        .layers
        .iter()
        .map(|l| GammaTrace {
            layer: l.name.clone(),
            gamma: Vec::with_capacity(epochs),
            deviation: Vec::with_capacity(epochs),
        })
        .collect();

    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let head_only = match method {
            Method::LinearProbe => true,
            Method::LPFT => epoch < cfg.lp_epochs,
            _ => false,
        };
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for idx in order.chunks(task.batch_size) {
            let (v, q, y) = train.rows(idx);
            let (loss, grads) = model.loss_and_grad(v.view(), q.view(), &y);
            if !loss.is_finite() {
                return Err(ToyError::DivergedLoss { epoch });
            }
            epoch_loss += loss;
            n_batches += 1;

            if method == Method::FTP {
                for (l, layer) in model.layers.iter_mut().enumerate() {
                    if let Some(prev) = ftp_prev[l].take() {
                        let before = LayerState {
                            theta: prev,
                            ..layer.clone()
                        };
                        let gg = ft::tpgm_gamma_grad(&before, grads[l].view())?;
                        layer.gamma = ft::ftp_gamma_update(layer, gg, cfg);
                    }
                }
            }

            for (l, (layer, g)) in model.layers.iter_mut().zip(&grads).enumerate() {
                if !head_only || l == HEAD {
                    layer.theta.scaled_add(-lr, g);
                }
            }

            match method {
                Method::L2SP if cfg.lambda > 0.0 => {
                    for layer in &mut model.layers {
                        decay_toward_anchor(layer, 1.0 + lr * cfg.lambda);
                    }
                }
                Method::TPGM => {
                    let mut projected = model.clone();
                    projected.layers.iter_mut().for_each(project_or_freeze);
                    let vb = &val_batches[val_cursor % val_batches.len()];
                    val_cursor += 1;
                    let (vv, vq, vy) = val.rows(vb);
                    let (_, val_grads) = projected.loss_and_grad(vv.view(), vq.view(), &vy);
                    for (layer, g) in model.layers.iter_mut().zip(&val_grads) {
                        if layer.deviation_norm() > layer.gamma {
                            let gg = ft::tpgm_gamma_grad(layer, g.view())?;
                            layer.gamma = (layer.gamma - cfg.gamma_lr * gg).max(0.0);
                        }
                    }
                    model.layers.iter_mut().for_each(project_or_freeze);
                }
                Method::FTP => {
                    for (l, layer) in model.layers.iter_mut().enumerate() {
                        if layer.deviation_norm() > layer.gamma {
                            ftp_prev[l] = Some(layer.theta.clone());
                            project_or_freeze(layer);
                        }
                    }
                }
                Method::SPD => {
                    let (_, next) = model.loss_and_grad(v.view(), q.view(), &y);
                    let outcomes = ft::spd_apply(&model.layers, &next, cfg)?;
                    for (layer, out) in model.layers.iter_mut().zip(outcomes) {
                        layer.theta = out.theta;
                        layer.gamma = out.gamma;
                        if out.contracted && cfg.lambda > 0.0 {
                            decay_toward_anchor(layer, 1.0 + lr * cfg.lambda);
                        }
                    }
                }
                _ => {}
            }

            if !all_finite(&model) {
                return Err(ToyError::DivergedLoss { epoch });
            }
            if method.is_constrained() {
                for layer in &model.layers {
                    let dev = layer.deviation_norm();
                    if dev > 0.0 {
                        max_ratio = max_ratio.max(if layer.gamma > 0.0 { dev / layer.gamma } else { f64::INFINITY });
                    }
                }
            }
        }
        loss_history.push(epoch_loss / n_batches as f64);
        for (trace, layer) in gamma_history.iter_mut().zip(&model.layers) {
            trace.gamma.push(layer.gamma);
            trace.deviation.push(layer.deviation_norm());
        }
    }

    if method == Method::WiSE {
        for layer in &mut model.layers {
            layer.theta = ft::wise_interpolate(layer.theta0.view(), layer.theta.view(), cfg.alpha)?;
        }
    }

    Ok(TrainOutcome {
        config: *cfg,
        id_acc: evaluate(&model, &task.id_test_split()),
        ood_acc: (0..task.ood_specs.len())
            .map(|i| (task.ood_specs[i].name.clone(), evaluate(&model, &task.ood_split(i))))
            .collect(),
        model,
        gamma_history,
        loss_history,
        max_constraint_ratio: max_ratio,
    })
}

/// Pre-trains and fine-tunes in one call.
pub fn train(task: &SyntheticTask, cfg: &MethodConfig, epochs: usize, lr: f64) -> Result<TrainOutcome, ToyError> {
    fine_tune(task, &pretrain(task)?, cfg, epochs, lr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub method: String,
    pub id_acc: Option<f64>,
    pub ood_acc: Vec<(String, Option<f64>)>,
    pub ood_avg: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub ood_names: Vec<String>,
    pub pretrained: BenchmarkRow,
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkTable {
    pub fn row(&self, label: &str) -> Option<&BenchmarkRow> {
        self.rows.iter().find(|r| r.method == label)
    }
}

/// Result of [`run_benchmark`] together with the per-method outcomes.
#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub table: BenchmarkTable,
    pub outcomes: Vec<Result<TrainOutcome, String>>,
}

/// Fine-tunes one shared pre-trained model with every config, in parallel.
/// A failing method yields a row with `error` set; the others still run.
pub fn run_benchmark(
    task: &SyntheticTask,
    methods: &[MethodConfig],
    epochs: usize,
    lr: f64,
) -> Result<BenchmarkRun, ToyError> {
    let pretrained = pretrain(task)?;
    let ood_names: Vec<String> = task.ood_specs.iter().map(|s| s.name.clone()).collect();
    let outcomes: Vec<Result<TrainOutcome, String>> = methods
        .par_iter()
        .map(|cfg| fine_tune(task, &pretrained, cfg, epochs, lr).map_err(|e| e.to_string()))
        .collect();
    let pre_ood: Vec<(String, Option<f64>)> = (0..ood_names.len())
        .map(|i| (ood_names[i].clone(), Some(evaluate(&pretrained, &task.ood_split(i)))))
        .collect();
    let pretrained_row = BenchmarkRow {
        method: "pretrained".into(),
        id_acc: Some(evaluate(&pretrained, &task.id_test_split())),
        ood_avg: Some(mean(pre_ood.iter().filter_map(|(_, a)| *a))),
        ood_acc: pre_ood,
        error: None,
    };
    let rows = methods
        .iter()
        .zip(&outcomes)
        .map(|(cfg, out)| match out {
            Ok(o) => BenchmarkRow {
                method: cfg.label(),
                id_acc: Some(o.id_acc),
                ood_acc: o.ood_acc.iter().map(|(n, a)| (n.clone(), Some(*a))).collect(),
                ood_avg: Some(o.ood_avg()),
                error: None,
            },
            Err(e) => BenchmarkRow {
                method: cfg.label(),
                id_acc: None,
                ood_acc: ood_names.iter().map(|n| (n.clone(), None)).collect(),
                ood_avg: None,
                error: Some(e.clone()),
            },
        })
        .collect();
    Ok(BenchmarkRun {
        table: BenchmarkTable {
            ood_names,
            pretrained: pretrained_row,
            rows,
        },
        outcomes,
    })
}
