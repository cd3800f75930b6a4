use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::model::{argmax, Dims};

/// A distribution shift applied to generated test data as a mean offset per
/// modality.
#[derive(Debug, Clone, PartialEq)]
pub struct OodSpec {
    pub name: String,
    pub v_shift: Array1<f64>,
    pub q_shift: Array1<f64>,
}

/// Synthetic two-modality classification task.
///
/// Each modality has `n_signal` informative dimensions followed by nuisance
/// dimensions. Labels come from a linear teacher over the informative
/// dimensions. During pre-training the question nuisance dimensions are pure
/// noise; in the fine-tuning distribution they carry a class-dependent
/// prototype, a stand-in for a question-type answer prior.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub dims: Dims,
    pub n_signal: usize,
    pub teacher_pre: Array2<f64>,
    pub teacher_id: Array2<f64>,
    pub prior_prototypes: Array2<f64>,
    pub prior_strength: f64,
    pub nuisance_sd: f64,
    pub pretrain_nuisance_sd: f64,
    pub label_noise: f64,
    pub annotator_agreement: f64,
    pub n_pretrain: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub ood_specs: Vec<OodSpec>,
    pub seed: u64,
}

/// Generated samples with the ten simulated annotator answers per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub v: Array2<f64>,
    pub q: Array2<f64>,
    pub labels: Vec<usize>,
    pub answers: Vec<[usize; 10]>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>, Vec<usize>) {
        (
            self.v.select(Axis(0), idx),
            self.q.select(Axis(0), idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Pretrain,
    Train,
    Val,
    Test,
    Ood(usize),
}

impl Source {
    fn stream(self) -> u64 {
        match self {
            Source::Pretrain => 1,
            Source::Train => 2,
            Source::Val => 3,
            Source::Test => 4,
            Source::Ood(i) => 100 + i as u64,
        }
    }
}

fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

impl SyntheticTask {
    /// Benchmark task with a large mean shift on the question nuisance
    /// dimensions, plus a smaller image-side shift and a zero-shift control.
    pub fn question_shift(seed: u64) -> Self {
        let dims = Dims {
            d_v: 8,
            d_q: 8,
            hidden: 12,
            fusion: 12,
            n_classes: 4,
        };
        let n_signal = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let teacher_pre = normal_matrix(&mut rng, dims.n_classes, 2 * n_signal);
        let teacher_id = &teacher_pre + &(normal_matrix(&mut rng, dims.n_classes, 2 * n_signal) * 0.5);
        let prior_prototypes = normal_matrix(&mut rng, dims.n_classes, dims.d_q - n_signal);
        let unit_shift = |rng: &mut ChaCha8Rng, d: usize, norm: f64| -> Array1<f64> {
            let mut x: Array1<f64> = Array1::from_shape_simple_fn(d - n_signal, || StandardNormal.sample(rng));
            x *= norm / x.dot(&x).sqrt();
            let mut full = Array1::zeros(d);
            full.slice_mut(s![n_signal..]).assign(&x);
            full
        };
        let q_big = unit_shift(&mut rng, dims.d_q, 12.0);
        let v_small = unit_shift(&mut rng, dims.d_v, 2.0);
        Self {
            dims,
            n_signal,
            teacher_pre,
            teacher_id,
            prior_prototypes,
            prior_strength: 1.0,
            nuisance_sd: 0.5,
            pretrain_nuisance_sd: 2.0,
            label_noise: 0.1,
            annotator_agreement: 0.9,
            n_pretrain: 4000,
            n_train: 400,
            n_val: 200,
            n_test: 1000,
            batch_size: 50,
            pretrain_epochs: 40,
            pretrain_lr: 0.2,
            ood_specs: vec![
                OodSpec {
                    name: "question".into(),
                    v_shift: Array1::zeros(dims.d_v),
                    q_shift: q_big,
                },
                OodSpec {
                    name: "image".into(),
                    v_shift: v_small,
                    q_shift: Array1::zeros(dims.d_q),
                },
            ],
            seed,
        }
    }

    /// Same task with a single zero-shift OOD split.
    pub fn no_shift(seed: u64) -> Self {
        let mut t = Self::question_shift(seed);
        t.ood_specs = vec![OodSpec {
            name: "none".into(),
            v_shift: Array1::zeros(t.dims.d_v),
            q_shift: Array1::zeros(t.dims.d_q),
        }];
        t
    }

    fn rng(&self, source: Source) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(source.stream());
        rng
    }

    fn generate(&self, source: Source, n: usize) -> Split {
        let mut rng = self.rng(source);
        let (d_v, d_q, k) = (self.dims.d_v, self.dims.d_q, self.n_signal);
        let pretrain = source == Source::Pretrain;
        let nuis_sd = if pretrain { self.pretrain_nuisance_sd } else { self.nuisance_sd };
        let teacher = if pretrain { &self.teacher_pre } else { &self.teacher_id };
        let noise = Normal::new(0.0, nuis_sd).unwrap();

        let mut v = Array2::zeros((n, d_v));
        let mut q = Array2::zeros((n, d_q));
        let mut labels = Vec::with_capacity(n);
        let mut answers = Vec::with_capacity(n);
        for i in 0..n {
            let mut signal = Array1::zeros(2 * k);
            for j in 0..2 * k {
                signal[j] = StandardNormal.sample(&mut rng);
            }
            let truth = argmax(teacher.dot(&signal).view());
            for j in 0..d_v {
                v[[i, j]] = if j < k { signal[j] } else { noise.sample(&mut rng) };
            }
            for j in 0..d_q {
                q[[i, j]] = if j < k {
                    signal[k + j]
                } else {
                    let prior = if pretrain {
                        0.0
                    } else {
                        self.prior_strength * self.prior_prototypes[[truth, j - k]]
                    };
                    prior + noise.sample(&mut rng)
                };
            }
            let flip: f64 = rng.random();
            let label = if source == Source::Train && flip < self.label_noise {
                rng.random_range(0..self.dims.n_classes)
            } else {
                truth
            };
            labels.push(label);
            let mut a = [truth; 10];
            for slot in &mut a {
                let agree: f64 = rng.random();
                if agree >= self.annotator_agreement {
                    *slot = rng.random_range(0..self.dims.n_classes);
                }
            }
            answers.push(a);
        }
        if let Source::Ood(idx) = source {
            let spec = &self.ood_specs[idx];
            v += &spec.v_shift;
            q += &spec.q_shift;
        }
        Split { v, q, labels, answers }
    }

    pub fn pretrain_split(&self) -> Split {
        self.generate(Source::Pretrain, self.n_pretrain)
    }

    pub fn train_split(&self) -> Split {
        self.generate(Source::Train, self.n_train)
    }

    pub fn val_split(&self) -> Split {
        self.generate(Source::Val, self.n_val)
    }

    pub fn id_test_split(&self) -> Split {
        self.generate(Source::Test, self.n_test)
    }

    pub fn ood_split(&self, index: usize) -> Split {
        self.generate(Source::Ood(index), self.n_test)
    }
}
