//! Weight-space operators for robust fine-tuning, over per-layer flat
//! parameter vectors.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, ArrayView1, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FtError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("alpha {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("gamma is zero; freeze the layer instead of projecting")]
    ZeroGamma,
    #[error("projection inactive: deviation {norm} within gamma {gamma}")]
    InactiveProjection { norm: f64, gamma: f64 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("layer '{name}': {source}")]
    Layer {
        name: String,
        #[source]
        source: Box<FtError>,
    },
    #[error("unknown method '{0}'")]
    UnknownMethod(String),
}

impl FtError {
    fn in_layer(self, name: &str) -> Self {
        FtError::Layer {
            name: name.to_string(),
            source: Box::new(self),
        }
    }
}

/// One layer's pre-trained weights, current weights and constraint radius.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub name: String,
    pub theta0: Array1<f64>,
    pub theta: Array1<f64>,
    pub gamma: f64,
}

impl LayerState {
    pub fn new(name: impl Into<String>, theta0: Array1<f64>, theta: Array1<f64>, gamma: f64) -> Result<Self, FtError> {
        check_len(theta0.len(), theta.len())?;
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(FtError::InvalidConfig(format!("gamma must be finite and >= 0, got {gamma}")));
        }
        if theta0.iter().chain(theta.iter()).any(|v| !v.is_finite()) {
            return Err(FtError::InvalidConfig("non-finite parameter".into()));
        }
        Ok(Self {
            name: name.into(),
            theta0,
            theta,
            gamma,
        })
    }

    pub fn deviation(&self) -> Array1<f64> {
        &self.theta - &self.theta0
    }

    pub fn deviation_norm(&self) -> f64 {
        dist(self.theta.view(), self.theta0.view())
    }
}

fn check_len(left: usize, right: usize) -> Result<(), FtError> {
    if left != right {
        return Err(FtError::LengthMismatch { left, right });
    }
    Ok(())
}

/// Euclidean distance `‖a − b‖₂`.
pub fn dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    Zip::from(&a)
        .and(&b)
        .fold(0.0, |acc, x, y| acc + (x - y) * (x - y))
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    VanillaFT,
    LinearProbe,
    LPFT,
    WiSE,
    L2SP,
    TPGM,
    FTP,
    SPD,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::VanillaFT,
        Method::LinearProbe,
        Method::LPFT,
        Method::WiSE,
        Method::L2SP,
        Method::TPGM,
        Method::FTP,
        Method::SPD,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::VanillaFT => "vanilla",
            Method::LinearProbe => "linear-probe",
            Method::LPFT => "lp-ft",
            Method::WiSE => "wise",
            Method::L2SP => "l2sp",
            Method::TPGM => "tpgm",
            Method::FTP => "ftp",
            Method::SPD => "spd",
        }
    }

    /// Methods that hold a per-layer constraint radius.
    pub fn is_constrained(self) -> bool {
        matches!(self, Method::TPGM | Method::FTP | Method::SPD)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = FtError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == key)
            .or(match key.as_str() {
                "vanilla-ft" | "ft" => Some(Method::VanillaFT),
                "lp" => Some(Method::LinearProbe),
                "l2-sp" => Some(Method::L2SP),
                _ => None,
            })
            .ok_or_else(|| FtError::UnknownMethod(s.to_string()))
    }
}

/// Hyper-parameters of one fine-tuning method. Fields the method does not
/// use are ignored but still validated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    pub lambda: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub spd_contraction: f64,
    pub gamma_lr: f64,
    pub lp_epochs: usize,
}

impl MethodConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            lambda: 0.5,
            alpha: 0.5,
            kappa: 0.0,
            spd_contraction: 0.9,
            gamma_lr: 0.05,
            lp_epochs: 10,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn validate(&self) -> Result<(), FtError> {
        let bad = |what: &str, v: f64| Err(FtError::InvalidConfig(format!("{what} = {v}")));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", self.lambda);
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(FtError::AlphaOutOfRange(self.alpha));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return bad("kappa", self.kappa);
        }
        if !(self.spd_contraction > 0.0 && self.spd_contraction <= 1.0) {
            return bad("spd_contraction", self.spd_contraction);
        }
        if !(self.gamma_lr > 0.0 && self.gamma_lr.is_finite()) {
            return bad("gamma_lr", self.gamma_lr);
        }
        Ok(())
    }

    /// Short label such as `wise(a=0.5)`.
    pub fn label(&self) -> String {
        match self.method {
            Method::WiSE => format!("wise(a={})", self.alpha),
            Method::L2SP => format!("l2sp(l={})", self.lambda),
            Method::FTP => format!("ftp(k={})", self.kappa),
            m => m.as_str().to_string(),
        }
    }
}

/// Initial constraint radius for learned-constraint methods.
pub fn initial_gamma(n_params: usize) -> f64 {
    1e-8 * (n_params as f64).sqrt()
}

/// `α·θt + (1 − α)·θ0`. The endpoints return the inputs exactly.
pub fn wise_interpolate(
    theta0: ArrayView1<'_, f64>,
    theta_t: ArrayView1<'_, f64>,
    alpha: f64,
) -> Result<Array1<f64>, FtError> {
    check_len(theta0.len(), theta_t.len())?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(FtError::AlphaOutOfRange(alpha));
    }
    if alpha == 1.0 {
        return Ok(theta_t.to_owned());
    }
    if alpha == 0.0 {
        return Ok(theta0.to_owned());
    }
    Ok(Zip::from(&theta0)
        .and(&theta_t)
        .map_collect(|a, b| alpha * b + (1.0 - alpha) * a))
}

/// Gradient of `λ/2·‖θ − θ0‖²`.
pub fn l2sp_grad(theta: ArrayView1<'_, f64>, theta0: ArrayView1<'_, f64>, lambda: f64) -> Result<Array1<f64>, FtError> {
    check_len(theta.len(), theta0.len())?;
    Ok(Zip::from(&theta).and(&theta0).map_collect(|t, t0| lambda * (t - t0)))
}

/// Projects `θt` onto the ball of radius `γ` around `θ0`.
///
/// Inside the ball `θt` is returned unchanged. Outside, the scale is nudged
/// down until the rounded result lies inside, so projecting again is a no-op.
pub fn pgm_project(state: &LayerState) -> Result<Array1<f64>, FtError> {
    if state.gamma <= 0.0 {
        return Err(FtError::ZeroGamma);
    }
    let norm = state.deviation_norm();
    if norm <= state.gamma {
        return Ok(state.theta.clone());
    }
    let dev = state.deviation();
    let mut scale = 1.0 / (norm / state.gamma).max(1.0);
    loop {
        let out = &state.theta0 + &(&dev * scale);
        if dist(out.view(), state.theta0.view()) <= state.gamma {
            return Ok(out);
        }
        scale = scale.next_down();
    }
}

/// `∂L/∂γ = u · g` with `u` the unit deviation, valid while the projection
/// is active.
pub fn tpgm_gamma_grad(state: &LayerState, task_grad_at_proj: ArrayView1<'_, f64>) -> Result<f64, FtError> {
    check_len(state.theta.len(), task_grad_at_proj.len())?;
    let norm = state.deviation_norm();
    if norm <= state.gamma {
        return Err(FtError::InactiveProjection {
            norm,
            gamma: state.gamma,
        });
    }
    let dot = Zip::from(&state.theta)
        .and(&state.theta0)
        .and(&task_grad_at_proj)
        .fold(0.0, |acc, t, t0, g| acc + (t - t0) * g);
    Ok(dot / norm)
}

/// Non-decreasing radius update with positive-gradient annealing by `κ`.
pub fn ftp_gamma_update(state: &LayerState, gamma_grad: f64, cfg: &MethodConfig) -> f64 {
    let g = if gamma_grad <= 0.0 { gamma_grad } else { cfg.kappa * gamma_grad };
    let stepped = state.gamma - cfg.gamma_lr * g;
    state.gamma.max(stepped)
}

/// `c = −g · (θt − θ0)`; positive when the descent direction agrees with
/// the progress made so far.
pub fn spd_condition(state: &LayerState, grad_next: ArrayView1<'_, f64>) -> Result<f64, FtError> {
    check_len(state.theta.len(), grad_next.len())?;
    let dot = Zip::from(&state.theta)
        .and(&state.theta0)
        .and(&grad_next)
        .fold(0.0, |acc, t, t0, g| acc + g * (t - t0));
    Ok(-dot)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpdOutcome {
    pub theta: Array1<f64>,
    pub gamma: f64,
    pub condition: f64,
    pub contracted: bool,
}

/// Expands the radius of consistent layers (`c > 0`) and contracts and
/// projects the rest (`c ≤ 0`).
pub fn spd_apply(states: &[LayerState], grads: &[Array1<f64>], cfg: &MethodConfig) -> Result<Vec<SpdOutcome>, FtError> {
    check_len(states.len(), grads.len())?;
    states
        .iter()
        .zip(grads)
        .map(|(state, g)| {
            let condition = spd_condition(state, g.view()).map_err(|e| e.in_layer(&state.name))?;
            let norm = state.deviation_norm();
            if condition > 0.0 {
                return Ok(SpdOutcome {
                    theta: state.theta.clone(),
                    gamma: state.gamma.max(norm),
                    condition,
                    contracted: false,
                });
            }
            let gamma = cfg.spd_contraction * norm;
            let theta = if gamma > 0.0 {
                let shrunk = LayerState { gamma, ..state.clone() };
                pgm_project(&shrunk).map_err(|e| e.in_layer(&state.name))?
            } else {
                state.theta.clone()
            };
            Ok(SpdOutcome {
                theta,
                gamma,
                condition,
                contracted: true,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn layer(theta0: Array1<f64>, theta: Array1<f64>, gamma: f64) -> LayerState {
        LayerState::new("l", theta0, theta, gamma).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Array1<f64> {
        let d = Normal::new(0.0, sd).unwrap();
        Array1::from_shape_simple_fn(n, || d.sample(rng))
    }

    #[test]
    fn wise_examples() {
        let t0 = array![0.3, -1.0];
        let t = array![2.0, 4.0];
        assert_eq!(wise_interpolate(t0.view(), t.view(), 1.0).unwrap(), t);
        assert_eq!(wise_interpolate(t0.view(), t.view(), 0.0).unwrap(), t0);
        let mid = wise_interpolate(array![0.0, 0.0].view(), t.view(), 0.5).unwrap();
        assert_eq!(mid, array![1.0, 2.0]);
        assert_eq!(
            wise_interpolate(t0.view(), t.view(), 1.5),
            Err(FtError::AlphaOutOfRange(1.5))
        );
        assert!(matches!(
            wise_interpolate(t0.view(), array![1.0].view(), 0.5),
            Err(FtError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn l2sp_examples() {
        let t0 = array![1.0, 1.0];
        assert_eq!(l2sp_grad(t0.view(), t0.view(), 3.0).unwrap(), array![0.0, 0.0]);
        assert_eq!(l2sp_grad(array![5.0, -2.0].view(), t0.view(), 0.0).unwrap(), array![0.0, 0.0]);
        assert_eq!(l2sp_grad(array![2.0, -2.0].view(), t0.view(), 2.0).unwrap(), array![2.0, -6.0]);
    }

    #[test]
    fn pgm_examples() {
        let inside = layer(array![0.0, 0.0], array![0.6, 0.8], 2.0);
        assert_eq!(pgm_project(&inside).unwrap(), inside.theta);
        let outside = layer(array![0.0, 0.0], array![3.0, 4.0], 2.5);
        assert_eq!(pgm_project(&outside).unwrap(), array![1.5, 2.0]);
        let frozen = layer(array![0.0], array![1.0], 0.0);
        assert_eq!(pgm_project(&frozen), Err(FtError::ZeroGamma));
    }

    proptest! {
        #[test]
        fn pgm_properties(seed in any::<u64>(), gamma in 1e-3f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t0 = random_vec(&mut rng, 512, 1.0);
            let t = &t0 + &random_vec(&mut rng, 512, 0.5);
            let s = layer(t0.clone(), t.clone(), gamma);
            let p = pgm_project(&s).unwrap();
            let post = dist(p.view(), t0.view());
            prop_assert!(post <= gamma * (1.0 + 1e-12));
            prop_assert!(post <= s.deviation_norm());
            let again = pgm_project(&LayerState { theta: p.clone(), ..s.clone() }).unwrap();
            prop_assert_eq!(&again, &p);
            // parallel: |cos| = 1
            let d0 = s.deviation();
            let d1 = &p - &t0;
            let cos = d0.dot(&d1) / (d0.dot(&d0).sqrt() * d1.dot(&d1).sqrt());
            prop_assert!((cos - 1.0).abs() < 1e-10);
        }

        #[test]
        fn wise_deviation_linear(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t0 = random_vec(&mut rng, 64, 1.0);
            let t = random_vec(&mut rng, 64, 1.0);
            let w = wise_interpolate(t0.view(), t.view(), alpha).unwrap();
            let full = dist(t.view(), t0.view());
            prop_assert!((dist(w.view(), t0.view()) - alpha * full).abs() <= 1e-12 * full.max(1.0));
        }

        #[test]
        fn spd_sign_is_scale_invariant(seed in any::<u64>(), c in 1e-3f64..1e3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = layer(random_vec(&mut rng, 16, 1.0), random_vec(&mut rng, 16, 1.0), 1.0);
            let g = random_vec(&mut rng, 16, 1.0);
            let a = spd_condition(&s, g.view()).unwrap();
            let b = spd_condition(&s, (&g * c).view()).unwrap();
            prop_assert_eq!(a.signum(), b.signum());
        }

        #[test]
        fn ftp_never_decreases(seed in any::<u64>(), kappa in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = MethodConfig::new(Method::FTP).with_kappa(kappa);
            let mut s = layer(array![0.0], array![1.0], 0.1);
            let d = Normal::new(0.0, 3.0).unwrap();
            for _ in 0..200 {
                let next = ftp_gamma_update(&s, d.sample(&mut rng), &cfg);
                prop_assert!(next >= s.gamma);
                s.gamma = next;
            }
        }
    }

    /// Quadratic loss `½‖θ̃ − c‖²` evaluated at the projection of `θt` with radius `γ`.
    fn projected_loss(s: &LayerState, target: &Array1<f64>, gamma: f64) -> f64 {
        let p = pgm_project(&LayerState { gamma, ..s.clone() }).unwrap();
        0.5 * (&p - target).mapv(|v| v * v).sum()
    }

    #[test]
    fn tpgm_grad_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-4;
        for _ in 0..50 {
            let t0 = random_vec(&mut rng, 8, 1.0);
            let t = &t0 + &random_vec(&mut rng, 8, 2.0);
            let gamma = 0.3 * dist(t.view(), t0.view());
            let s = layer(t0, t, gamma);
            let target = random_vec(&mut rng, 8, 1.0);
            let proj = pgm_project(&s).unwrap();
            let grad = &proj - &target;
            let analytic = tpgm_gamma_grad(&s, grad.view()).unwrap();
            let numeric = (projected_loss(&s, &target, gamma + h) - projected_loss(&s, &target, gamma - h)) / (2.0 * h);
            assert!((analytic - numeric).abs() <= 1e-5, "{analytic} vs {numeric}");
        }
    }

    #[test]
    fn tpgm_examples() {
        let s = layer(array![0.0, 0.0], array![3.0, 0.0], 1.0);
        assert_eq!(tpgm_gamma_grad(&s, array![-2.0, 7.0].view()).unwrap(), -2.0);
        assert_eq!(tpgm_gamma_grad(&s, array![0.0, 5.0].view()).unwrap(), 0.0);
        let inactive = layer(array![0.0, 0.0], array![0.5, 0.0], 1.0);
        assert!(matches!(
            tpgm_gamma_grad(&inactive, array![1.0, 0.0].view()),
            Err(FtError::InactiveProjection { .. })
        ));
    }

    #[test]
    fn ftp_examples() {
        let cfg = MethodConfig {
            gamma_lr: 0.1,
            ..MethodConfig::new(Method::FTP)
        };
        let s = layer(array![0.0], array![1.0], 2.0);
        assert!((ftp_gamma_update(&s, -1.0, &cfg) - 2.1).abs() < 1e-15);
        assert_eq!(ftp_gamma_update(&s, 5.0, &cfg), 2.0);
        let half = cfg.with_kappa(0.5);
        assert_eq!(ftp_gamma_update(&s, 5.0, &half), 2.0);
    }

    #[test]
    fn spd_condition_examples() {
        let s = layer(array![0.0, 0.0], array![0.0, 0.0], 1.0);
        assert_eq!(spd_condition(&s, array![3.0, 1.0].view()).unwrap(), 0.0);
        let s = layer(array![0.0, 0.0], array![1.0, 0.0], 1.0);
        assert_eq!(spd_condition(&s, array![1.0, 0.0].view()).unwrap(), -1.0);
        assert_eq!(spd_condition(&s, array![-1.0, 0.0].view()).unwrap(), 1.0);
    }

    #[test]
    fn spd_apply_branches() {
        let cfg = MethodConfig {
            spd_contraction: 0.5,
            ..MethodConfig::new(Method::SPD)
        };
        let states = vec![
            LayerState::new("a", array![0.0, 0.0], array![4.0, 0.0], 1.0).unwrap(),
            LayerState::new("b", array![0.0, 0.0], array![0.0, 2.0], 1.0).unwrap(),
        ];
        // layer a inconsistent, layer b consistent
        let grads = vec![array![1.0, 0.0], array![0.0, -1.0]];
        let out = spd_apply(&states, &grads, &cfg).unwrap();
        assert!(out[0].contracted && !out[1].contracted);
        assert!((dist(out[0].theta.view(), states[0].theta0.view()) - 2.0).abs() < 1e-10);
        assert_eq!(out[0].gamma, 2.0);
        assert_eq!(out[1].theta, states[1].theta);
        assert_eq!(out[1].gamma, 2.0);

        let all_good = spd_apply(&states, &[array![-1.0, 0.0], array![0.0, -1.0]], &cfg).unwrap();
        assert!(all_good.iter().zip(&states).all(|(o, s)| o.theta == s.theta));

        let still = vec![LayerState::new("z", array![1.0], array![1.0], 1.0).unwrap()];
        let out = spd_apply(&still, &[array![0.5]], &cfg).unwrap();
        assert!(out[0].contracted);
        assert_eq!(out[0].theta, array![1.0]);

        let err = spd_apply(&states, &[array![1.0], array![0.0, 1.0]], &cfg).unwrap_err();
        assert!(matches!(err, FtError::Layer { ref name, .. } if name == "a"));
    }

    #[test]
    fn config_validation_and_names() {
        assert!(MethodConfig::new(Method::SPD).validate().is_ok());
        assert!(MethodConfig::new(Method::WiSE).with_alpha(1.2).validate().is_err());
        assert!(MethodConfig::new(Method::FTP).with_kappa(-0.1).validate().is_err());
        let bad = MethodConfig {
            spd_contraction: 0.0,
            ..MethodConfig::new(Method::VanillaFT)
        };
        assert!(bad.validate().is_err());
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("mars-sp".parse::<Method>().is_err());
    }
}
