use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::ft::LayerState;

pub const LAYER_NAMES: [&str; 4] = ["enc_v", "enc_q", "fusion", "head"];
pub const HEAD: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub d_v: usize,
    pub d_q: usize,
    pub hidden: usize,
    pub fusion: usize,
    pub n_classes: usize,
}

impl Dims {
    /// `(out, in)` of each layer; every layer also has `out` biases.
    pub fn shapes(&self) -> [(usize, usize); 4] {
        [
            (self.hidden, self.d_v),
            (self.hidden, self.d_q),
            (self.fusion, 2 * self.hidden),
            (self.n_classes, self.fusion),
        ]
    }
}

/// Two tanh encoders, a tanh fusion layer and a linear softmax head.
///
/// Each layer is stored flat as a row-major `(out, in + 1)` matrix whose last
/// column holds the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub dims: Dims,
    pub layers: Vec<LayerState>,
}

pub(crate) struct Activations {
    hv: Array2<f64>,
    hq: Array2<f64>,
    z: Array2<f64>,
    hf: Array2<f64>,
    pub logits: Array2<f64>,
}

fn weights(theta: &Array1<f64>, shape: (usize, usize)) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((shape.0, shape.1 + 1), theta.as_slice().expect("contiguous")).expect("layer size")
}

fn affine(w: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>) -> Array2<f64> {
    let n_in = x.ncols();
    x.dot(&w.slice(s![.., ..n_in]).t()) + w.column(n_in)
}

fn weight_grad(delta: &Array2<f64>, input: &Array2<f64>) -> Array1<f64> {
    let (out, n_in) = (delta.ncols(), input.ncols());
    let mut g = Array2::zeros((out, n_in + 1));
    g.slice_mut(s![.., ..n_in]).assign(&delta.t().dot(input));
    g.column_mut(n_in).assign(&delta.sum_axis(Axis(0)));
    g.into_shape_with_order(out * (n_in + 1)).expect("contiguous")
}

impl ToyModel {
    /// Gaussian initialization scaled by `1/√fan_in`; `theta0` equals `theta`.
    pub fn init<R: Rng + ?Sized>(dims: Dims, rng: &mut R) -> Self {
        let layers = dims
            .shapes()
            .iter()
            .zip(LAYER_NAMES)
            .map(|(&(out, n_in), name)| {
                let d = Normal::new(0.0, 1.0 / (n_in as f64).sqrt()).unwrap();
                let mut w = Array2::<f64>::zeros((out, n_in + 1));
                w.slice_mut(s![.., ..n_in]).mapv_inplace(|_| d.sample(rng));
                let flat = w.into_shape_with_order(out * (n_in + 1)).unwrap();
                LayerState {
                    name: name.to_string(),
                    theta0: flat.clone(),
                    theta: flat,
                    gamma: 0.0,
                }
            })
            .collect();
        Self { dims, layers }
    }

    /// Resets the reference point of every layer to the current weights.
    pub fn anchor(&mut self) {
        for l in &mut self.layers {
            l.theta0 = l.theta.clone();
            l.gamma = 0.0;
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.theta.len()).sum()
    }

    pub(crate) fn forward(&self, v: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>) -> Activations {
        let sh = self.dims.shapes();
        let hv = affine(weights(&self.layers[0].theta, sh[0]), v).mapv(f64::tanh);
        let hq = affine(weights(&self.layers[1].theta, sh[1]), q).mapv(f64::tanh);
        let z = concatenate![Axis(1), hv, hq];
        let hf = affine(weights(&self.layers[2].theta, sh[2]), z.view()).mapv(f64::tanh);
        let logits = affine(weights(&self.layers[3].theta, sh[3]), hf.view());
        Activations { hv, hq, z, hf, logits }
    }

    pub fn logits(&self, v: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>) -> Array2<f64> {
        self.forward(v, q).logits
    }

    /// Arg-max class per row; ties resolve to the lowest index.
    pub fn predict(&self, v: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>) -> Vec<usize> {
        self.logits(v, q).outer_iter().map(|row| argmax(row)).collect()
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, v: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>, y: &[usize]) -> f64 {
        let logits = self.logits(v, q);
        logits
            .outer_iter()
            .zip(y)
            .map(|(row, &c)| log_sum_exp(row) - row[c])
            .sum::<f64>()
            / y.len() as f64
    }

    /// Mean cross-entropy and its gradient with respect to every layer.
    pub fn loss_and_grad(&self, v: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>, y: &[usize]) -> (f64, Vec<Array1<f64>>) {
        let sh = self.dims.shapes();
        let a = self.forward(v, q);
        let b = y.len() as f64;
        let mut delta = a.logits.clone();
        let mut loss = 0.0;
        for (mut row, &c) in delta.outer_iter_mut().zip(y) {
            let lse = log_sum_exp(row.view());
            loss += lse - row[c];
            row.mapv_inplace(|x| (x - lse).exp() / b);
            row[c] -= 1.0 / b;
        }
        let g_head = weight_grad(&delta, &a.hf);
        let w_head = weights(&self.layers[3].theta, sh[3]);
        let d_hf = delta.dot(&w_head.slice(s![.., ..self.dims.fusion])) * a.hf.mapv(|h| 1.0 - h * h);
        let g_fusion = weight_grad(&d_hf, &a.z);
        let w_fusion = weights(&self.layers[2].theta, sh[2]);
        let d_z = d_hf.dot(&w_fusion.slice(s![.., ..2 * self.dims.hidden]));
        let h = self.dims.hidden;
        let d_hv = &d_z.slice(s![.., ..h]) * &a.hv.mapv(|x| 1.0 - x * x);
        let d_hq = &d_z.slice(s![.., h..]) * &a.hq.mapv(|x| 1.0 - x * x);
        let g_v = weight_grad(&d_hv, &v.to_owned());
        let g_q = weight_grad(&d_hq, &q.to_owned());
        (loss / b, vec![g_v, g_q, g_fusion, g_head])
    }
}

pub(crate) fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(row: ArrayView1<'_, f64>) -> f64 {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn dims() -> Dims {
        Dims {
            d_v: 3,
            d_q: 4,
            hidden: 5,
            fusion: 4,
            n_classes: 3,
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-5;
        for _ in 0..20 {
            let model = ToyModel::init(dims(), &mut rng);
            let mut model = model;
            for l in &mut model.layers {
                l.theta.mapv_inplace(|x| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x + 0.3 * z
                });
            }
            let v = Array2::from_shape_simple_fn((6, 3), || StandardNormal.sample(&mut rng));
            let q = Array2::from_shape_simple_fn((6, 4), || StandardNormal.sample(&mut rng));
            let y: Vec<usize> = (0..6).map(|i| i % 3).collect();
            let (_, grads) = model.loss_and_grad(v.view(), q.view(), &y);
            for (li, g) in grads.iter().enumerate() {
                for k in 0..g.len() {
                    let mut plus = model.clone();
                    plus.layers[li].theta[k] += h;
                    let mut minus = model.clone();
                    minus.layers[li].theta[k] -= h;
                    let numeric = (plus.loss(v.view(), q.view(), &y) - minus.loss(v.view(), q.view(), &y)) / (2.0 * h);
                    let scale = g[k].abs().max(numeric.abs()).max(1e-6);
                    assert!((g[k] - numeric).abs() / scale <= 1e-4, "layer {li} k {k}: {} vs {numeric}", g[k]);
                }
            }
        }
    }

    #[test]
    fn layer_sizes_and_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = ToyModel::init(dims(), &mut rng);
        let sizes: Vec<usize> = m.layers.iter().map(|l| l.theta.len()).collect();
        assert_eq!(sizes, vec![5 * 4, 5 * 5, 4 * 11, 3 * 5]);
        let names: Vec<&str> = m.layers.iter().map(|l| l.name.as_str()).collect();
        assert_eq!(names, LAYER_NAMES);
        assert_eq!(m.n_params(), 20 + 25 + 44 + 15);
    }
}
