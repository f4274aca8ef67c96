//! Training objective and the Adam update rule.
//!
//! The objective is cross-entropy plus `λ·‖w_fc‖²`, where `w_fc` are the
//! weight matrices of the two fully-connected classifier layers (biases and
//! every other parameter are not penalised). No optimizer-level weight decay
//! is applied on top of that term.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::augment::AugmentConfig;
use crate::error::{config_err, param_err, state_err, Result};
use crate::model::{kv_pairs, DeepEmotionModel, Gradients, PENALIZED};
use crate::tensor::Tensor;
use crate::Scalar;

/// Candidate regularisation weights for validation sweeps.
pub const LAMBDA_GRID: [f64; 3] = [1e-4, 1e-3, 1e-2];

/// Optimisation hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Weight of the L2 penalty on the fully-connected classifier weights.
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            lambda: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 128,
            epochs: 500,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(config_err!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err!("Adam betas must lie in [0, 1)"));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(config_err!("epsilon must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        self.augment.validate()
    }

    pub fn to_kv(&self) -> String {
        let a = &self.augment;
        format!(
            "learning_rate={:?}\nlambda={:?}\nbeta1={:?}\nbeta2={:?}\nepsilon={:?}\nbatch_size={}\n\
             epochs={}\naugment={}\nflip_prob={:?}\nmax_rotation_deg={:?}\nmax_translation_frac={:?}\n",
            self.learning_rate,
            self.lambda,
            self.beta1,
            self.beta2,
            self.epsilon,
            self.batch_size,
            self.epochs,
            a.enabled,
            a.flip_prob,
            a.max_rotation_deg,
            a.max_translation_frac,
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (key, value) in kv_pairs(text)? {
            let float = || value.parse::<f64>().map_err(|_| config_err!("bad number for {key}: {value:?}"));
            let int = || value.parse::<usize>().map_err(|_| config_err!("bad integer for {key}: {value:?}"));
            match key {
                "learning_rate" => cfg.learning_rate = float()?,
                "lambda" => cfg.lambda = float()?,
                "beta1" => cfg.beta1 = float()?,
                "beta2" => cfg.beta2 = float()?,
                "epsilon" => cfg.epsilon = float()?,
                "batch_size" => cfg.batch_size = int()?,
                "epochs" => cfg.epochs = int()?,
                "augment" => {
                    cfg.augment.enabled = value.parse().map_err(|_| config_err!("bad bool {value:?}"))?
                }
                "flip_prob" => cfg.augment.flip_prob = float()?,
                "max_rotation_deg" => cfg.augment.max_rotation_deg = float()?,
                "max_translation_frac" => cfg.augment.max_translation_frac = float()?,
                _ => return Err(config_err!("unknown train config key {key:?}")),
            }
        }
        Ok(cfg)
    }
}

/// `ce_loss + λ·(‖fc1.weight‖² + ‖fc2.weight‖²)`.
pub fn overall_loss<T: Scalar>(ce_loss: T, model: &DeepEmotionModel<T>, lambda: f64) -> Result<T> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(param_err!("lambda must be >= 0, got {lambda}"));
    }
    if lambda == 0.0 {
        return Ok(ce_loss);
    }
    Ok(ce_loss + T::from_f64_lossy(lambda) * penalty(model))
}

/// `‖fc1.weight‖² + ‖fc2.weight‖²`.
pub fn penalty<T: Scalar>(model: &DeepEmotionModel<T>) -> T {
    PENALIZED
        .iter()
        .filter_map(|n| model.param(n))
        .fold(T::zero(), |acc, t| acc + t.sum_squares())
}

/// Gradient of the penalty term: `2λ·w` on the penalised weights, zero elsewhere.
pub fn regularization_gradient<T: Scalar>(model: &DeepEmotionModel<T>, lambda: f64) -> Result<Gradients<T>> {
    let params = model.params();
    let mut g = Gradients::zeros_like(&params);
    let k = T::from_f64_lossy(2.0 * lambda);
    for name in PENALIZED {
        let w = model.param(name).ok_or_else(|| state_err!("missing {name}"))?;
        *g.get_mut(name).ok_or_else(|| state_err!("missing {name}"))? = w.mul_scalar(k)?;
    }
    Ok(g)
}

/// Adds `2λ·w` to the penalised entries of `grads` in place.
pub fn add_regularization_gradient<T: Scalar>(
    grads: &mut Gradients<T>,
    model: &DeepEmotionModel<T>,
    lambda: f64,
) -> Result<()> {
    if lambda == 0.0 {
        return Ok(());
    }
    let k = T::from_f64_lossy(2.0 * lambda);
    for name in PENALIZED {
        let w = model.param(name).ok_or_else(|| state_err!("missing {name}"))?;
        let g = grads.get_mut(name).ok_or_else(|| state_err!("gradient for {name} missing"))?;
        if g.shape() != w.shape() {
            return Err(state_err!("gradient for {name} has the wrong shape"));
        }
        for (gv, &wv) in g.data_mut().iter_mut().zip(w.data()) {
            *gv = *gv + k * wv;
        }
    }
    Ok(())
}

/// Adam moment constants and step size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig { learning_rate: c.learning_rate, beta1: c.beta1, beta2: c.beta2, epsilon: c.epsilon }
    }
}

/// First/second moment estimates per registry entry plus the step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    names: Vec<&'static str>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState { names: Vec::new(), m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| *n == name).map(|i| &self.m[i])
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| *n == name).map(|i| &self.v[i])
    }
}

/// One bias-corrected Adam update:
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
/// `p ← p − lr·m̂/(√v̂ + ε)` with `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`.
pub fn adam_step<T: Scalar>(
    params: &mut [(&'static str, &mut Tensor<T>)],
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    let names: Vec<&'static str> = params.iter().map(|(n, _)| *n).collect();
    if names != grads.names() {
        return Err(state_err!("gradient registry {:?} does not match parameters {:?}", grads.names(), names));
    }
    if state.t == 0 && state.names.is_empty() {
        state.names = names.clone();
        state.m = params.iter().map(|(_, p)| Tensor::zeros_like(p)).collect();
        state.v = params.iter().map(|(_, p)| Tensor::zeros_like(p)).collect();
    } else if state.names != names {
        return Err(state_err!("Adam state was built for a different registry"));
    }
    for (((_, p), (_, g)), m) in params.iter().zip(grads.iter()).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(state_err!("shape mismatch between parameter, gradient and Adam moments"));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let one = T::one();
    let c1 = T::from_f64_lossy(1.0 - libm_powi(cfg.beta1, t));
    let c2 = T::from_f64_lossy(1.0 - libm_powi(cfg.beta2, t));
    let lr = T::from_f64_lossy(cfg.learning_rate);
    let eps = T::from_f64_lossy(cfg.epsilon);

    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((_, p), (_, g)), (m, v)) in params.iter_mut().zip(grads.iter()).zip(moments) {
        let moments = m.data_mut().iter_mut().zip(v.data_mut().iter_mut());
        for ((pv, &gv), (mv, vv)) in p.data_mut().iter_mut().zip(g.data()).zip(moments) {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.check_finite("adam_step")?;
    }
    Ok(())
}

fn libm_powi(base: f64, exp: i32) -> f64 {
    num_traits::Float::powi(base, exp)
}
