//! AdamW with decoupled weight decay and a cosine schedule with warm restarts.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::unet::Param;
use super::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First/second moment estimates, one pair of arrays per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &[Param<T>], config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| vec![T::zero(); p.values.len()]).collect(),
            second: params.iter().map(|p| vec![T::zero(); p.values.len()]).collect(),
        }
    }

    pub fn first_moment(&self, i: usize) -> &[T] {
        &self.first[i]
    }

    pub fn second_moment(&self, i: usize) -> &[T] {
        &self.second[i]
    }
}

/// One AdamW update: `p ← p·(1 − lr·wd)`, then the bias-corrected Adam step.
pub fn adamw_step<T: Scalar, G: AsRef<[T]>>(
    params: &mut [Param<T>],
    grads: &[G],
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<(), NetError> {
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(NetError::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.values.len() != g.as_ref().len() {
            return Err(NetError::ShapeMismatch(format!(
                "gradient for {} has {} values, expected {}",
                p.name,
                g.as_ref().len(),
                p.values.len()
            )));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let correct1 = T::one() - b1.powi(t);
    let correct2 = T::one() - b2.powi(t);
    let decay = T::one() - T::of(lr) * T::of(c.weight_decay);
    let (lr, eps) = (T::of(lr), T::of(c.eps));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, (x, &gj)) in p.values.iter_mut().zip(g.as_ref()).enumerate() {
            *x *= decay;
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let m_hat = m[j] / correct1;
            let v_hat = v[j] / correct2;
            *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine annealing from `lr_max` to `lr_min`, restarting every `period` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub period: f64,
}

impl Default for CosineSchedule {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            lr_min: 1e-5,
            period: 25.0,
        }
    }
}

impl CosineSchedule {
    /// Rate at a (possibly fractional) epoch position.
    pub fn at(&self, epoch: f64) -> f64 {
        let phase = epoch.rem_euclid(self.period) / self.period;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (PI * phase).cos())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.at(epoch as f64)
    }
}

/// Default schedule: 1e-3 → 1e-5 over 25 epochs, then reset.
pub fn cosine_lr(epoch: usize) -> f64 {
    CosineSchedule::default().lr(epoch)
}
