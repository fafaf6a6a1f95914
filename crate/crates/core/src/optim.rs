//! Adam optimizer with decoupled weight decay over named flat tensors.
//!
//! Parameters are visited as `(name, &mut [F])` slices; the optimizer keeps
//! first/second moments per name. Weight decay is applied multiplicatively
//! to the parameter (`θ ← θ·(1 − lr·λ)`) before the moment-based update and
//! never flows through the gradient — so the moments track the pure loss
//! gradient, and a zero learning rate leaves parameters bitwise unchanged.

use crate::error::{Error, Result};
use crate::real::Real;
use std::collections::BTreeMap;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if self.eps <= 0.0 {
            return Err(Error::config("eps must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight decay must be finite and non-negative"));
        }
        Ok(())
    }
}

/// First/second moment buffers of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPair<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
}

/// Optimizer state: global step count plus per-tensor moments, keyed by
/// tensor name (ordered map — iteration order is deterministic).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState<F> {
    pub step: u64,
    pub slots: BTreeMap<String, MomentPair<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Starts optimizer step `t` (1-based); call once per training step,
    /// before the per-tensor updates that share its bias correction.
    pub fn begin_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    /// Applies one AdamW update to a tensor. The moment slot is created on
    /// first use; afterwards its length is pinned to the tensor's.
    pub fn update_tensor(
        &mut self,
        config: &AdamConfig,
        name: &str,
        param: &mut [F],
        grad: &[F],
    ) -> Result<()> {
        if self.step == 0 {
            return Err(Error::validation("update_tensor called before begin_step"));
        }
        if param.len() != grad.len() {
            return Err(Error::validation(format!(
                "tensor {name}: parameter length {} != gradient length {}",
                param.len(),
                grad.len()
            )));
        }
        let slot = self
            .slots
            .entry(name.to_string())
            .or_insert_with(|| MomentPair {
                m: vec![F::zero(); param.len()],
                v: vec![F::zero(); param.len()],
            });
        if slot.m.len() != param.len() {
            return Err(Error::validation(format!(
                "tensor {name}: moment length {} != parameter length {}",
                slot.m.len(),
                param.len()
            )));
        }
        let t = self.step as i32;
        let beta1 = F::from_f64(config.beta1);
        let beta2 = F::from_f64(config.beta2);
        let one = F::one();
        let bc1 = F::from_f64(1.0 - config.beta1.powi(t));
        let bc2 = F::from_f64(1.0 - config.beta2.powi(t));
        let lr = F::from_f64(config.lr);
        let eps = F::from_f64(config.eps);
        let decay = F::from_f64(1.0 - config.lr * config.weight_decay);
        for ((p, &g), (m, v)) in param
            .iter_mut()
            .zip(grad)
            .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
        {
            *m = beta1 * *m + (one - beta1) * g;
            *v = beta2 * *v + (one - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(lr: f64, wd: f64) -> AdamConfig {
        AdamConfig::new(lr, wd)
    }

    /// Independent scalar reference: the textbook AdamW recurrence unrolled
    /// step by step at f64.
    fn reference_adamw(
        theta0: f64,
        grads: &[f64],
        cfg: &AdamConfig,
    ) -> f64 {
        let mut theta = theta0;
        let (mut m, mut v) = (0.0, 0.0);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(t));
            let v_hat = v / (1.0 - cfg.beta2.powi(t));
            theta = theta * (1.0 - cfg.lr * cfg.weight_decay)
                - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        theta
    }

    #[test]
    fn matches_scalar_reference_over_many_steps() {
        let cfg = config(0.01, 0.2);
        let grads = [0.3, -0.7, 0.1, 0.9, -0.2, 0.05, -0.4, 0.6];
        let mut state = AdamState::<f64>::new();
        let mut param = [1.5f64];
        for &g in &grads {
            state.begin_step();
            state.update_tensor(&cfg, "w", &mut param, &[g]).unwrap();
        }
        let want = reference_adamw(1.5, &grads, &cfg);
        assert!((param[0] - want).abs() < 1e-14, "{} vs {want}", param[0]);
    }

    /// With zero gradient, moments stay at zero and the *only* effect is the
    /// multiplicative decay — the defining behavior of decoupled decay
    /// (coupled L2 would push wd·θ through the moments instead).
    #[test]
    fn zero_gradient_decays_multiplicatively() {
        let cfg = config(0.1, 0.5);
        let mut state = AdamState::<f64>::new();
        let mut param = [2.0f64, -3.0];
        for _ in 0..4 {
            state.begin_step();
            state
                .update_tensor(&cfg, "w", &mut param, &[0.0, 0.0])
                .unwrap();
        }
        let factor = (1.0 - 0.1 * 0.5f64).powi(4);
        assert!((param[0] - 2.0 * factor).abs() < 1e-15);
        assert!((param[1] + 3.0 * factor).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_a_bitwise_no_op() {
        let cfg = config(0.0, 0.2);
        let mut state = AdamState::<f32>::new();
        let mut param = [0.25f32, -1.75, 3.125];
        let before = param;
        for step in 0..3 {
            state.begin_step();
            state
                .update_tensor(&cfg, "w", &mut param, &[1.0, -2.0, 0.5 * step as f32])
                .unwrap();
        }
        assert_eq!(param, before);
        // Moments still advanced — only the parameter update was null.
        assert!(state.slots["w"].m.iter().any(|&m| m != 0.0));
    }

    /// After bias correction the first step moves by ≈ lr·sign(g).
    #[test]
    fn first_step_is_sign_scaled() {
        let cfg = config(0.001, 0.0);
        let mut state = AdamState::<f64>::new();
        let mut param = [0.0f64, 0.0];
        state.begin_step();
        state
            .update_tensor(&cfg, "w", &mut param, &[0.4, -7.0])
            .unwrap();
        assert!((param[0] + 0.001).abs() < 1e-9);
        assert!((param[1] - 0.001).abs() < 1e-9);
    }

    #[test]
    fn misuse_is_rejected() {
        let cfg = config(0.01, 0.0);
        let mut state = AdamState::<f64>::new();
        let mut param = [1.0f64];
        assert!(state.update_tensor(&cfg, "w", &mut param, &[0.1]).is_err());
        state.begin_step();
        assert!(state.update_tensor(&cfg, "w", &mut param, &[0.1, 0.2]).is_err());
        state.update_tensor(&cfg, "w", &mut param, &[0.1]).unwrap();
        // Same name with a different length is a state corruption.
        let mut longer = [1.0f64, 2.0];
        assert!(state
            .update_tensor(&cfg, "w", &mut longer, &[0.1, 0.2])
            .is_err());
    }

    #[test]
    fn config_validation() {
        assert!(config(0.001, 0.2).validate().is_ok());
        assert!(config(-0.1, 0.2).validate().is_err());
        assert!(config(0.001, -0.2).validate().is_err());
        let mut bad = config(0.001, 0.2);
        bad.beta1 = 1.0;
        assert!(bad.validate().is_err());
        bad = config(0.001, 0.2);
        bad.eps = 0.0;
        assert!(bad.validate().is_err());
    }
}
