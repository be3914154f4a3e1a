use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// First/second moments per parameter and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }
}

/// AdamW with decoupled weight decay and optional per-parameter lr multipliers.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub state: OptimizerState<T>,
    lr_scale: Vec<f64>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        Self { config, state: OptimizerState::new(params), lr_scale: vec![1.0; params.len()] }
    }

    /// Multipliers applied to the step lr, one per parameter in store order.
    pub fn set_lr_scale(&mut self, scale: Vec<f64>) -> Result<(), TensorError> {
        if scale.len() != self.lr_scale.len() {
            return Err(TensorError::Contract(format!("{} lr scales for {} parameters", scale.len(), self.lr_scale.len())));
        }
        self.lr_scale = scale;
        Ok(())
    }

    pub fn lr_scale(&self) -> &[f64] {
        &self.lr_scale
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<(), TensorError> {
        adamw_step(params, &mut self.state, &self.config, lr, &self.lr_scale)
    }
}

/// One update of every parameter, then clears the gradients.
///
/// `w ← w − lr·wd·w`, followed by `w ← w − lr·m̂/(√v̂ + eps)`.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    cfg: &AdamWConfig,
    lr: f64,
    lr_scale: &[f64],
) -> Result<(), TensorError> {
    if state.m.len() != params.len() || lr_scale.len() != params.len() {
        return Err(TensorError::Contract("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (b1t, b2t, eps) = (T::lit(b1), T::lit(b2), T::lit(cfg.eps));
    for (i, p) in params.iter_mut().enumerate() {
        if state.m[i].shape() != p.value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw",
                lhs: p.value.shape().to_vec(),
                rhs: state.m[i].shape().to_vec(),
            });
        }
        let lr_i = lr * lr_scale[i];
        let decay = T::lit(1.0 - lr_i * cfg.weight_decay);
        let step_size = T::lit(lr_i / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let g = p.grad.data().to_vec();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = p.value.data_mut();
        for j in 0..w.len() {
            m[j] = b1t * m[j] + (T::one() - b1t) * g[j];
            v[j] = b2t * v[j] + (T::one() - b2t) * g[j] * g[j];
            let denom = (v[j] * inv_bc2).sqrt() + eps;
            w[j] = w[j] * decay - step_size * m[j] / denom;
        }
        p.grad.data_mut().iter_mut().for_each(|x| *x = T::zero());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(w: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::full([3], w)).unwrap();
        s.get_mut(id).grad = Tensor::full([3], g);
        s
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut s = store(0.7, 0.0);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s, 0.001).unwrap();
        assert!(s.by_name("w").unwrap().value.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn zero_grad_decay_scales_weights() {
        let mut s = store(2.0, 0.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.step(&mut s, 0.001).unwrap();
        let want = 2.0 * (1.0 - 5e-5);
        assert!(s.by_name("w").unwrap().value.data().iter().all(|&v| (v - want).abs() < 1e-15));
    }

    #[test]
    fn two_steps_match_hand_unrolled_recursion() {
        let (lr, b1, b2, eps, wd) = (0.01, 0.9, 0.95, 1e-8, 0.05);
        let mut w = 0.5f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = 1.0;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            w -= lr * wd * w;
            w -= lr * mhat / (vhat.sqrt() + eps);
        }

        let mut s = store(0.5, 1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        for _ in 0..2 {
            let id = s.id("w").unwrap();
            s.get_mut(id).grad = Tensor::full([3], 1.0);
            opt.step(&mut s, lr).unwrap();
        }
        for &got in s.by_name("w").unwrap().value.data() {
            assert!((got - w).abs() < 1e-12, "{got} vs {w}");
        }
        assert_eq!(opt.state.step, 2);
    }

    #[test]
    fn grads_are_cleared() {
        let mut s = store(1.0, 3.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.step(&mut s, 0.1).unwrap();
        assert!(s.by_name("w").unwrap().grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_lr_leaves_params_bitwise() {
        let mut s = store(0.123, 4.0);
        let before = s.by_name("w").unwrap().value.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.step(&mut s, 0.0).unwrap();
        assert_eq!(s.by_name("w").unwrap().value, before);
    }
}
