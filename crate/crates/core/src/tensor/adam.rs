//! Adam with bias-corrected moment estimates.

use std::collections::BTreeMap;

use super::params::ParamSet;
use crate::error::{config_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    /// name -> (first moment, second moment)
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self::with_hyper(lr, 0.9, 0.999, 1e-8).expect("default Adam hyperparameters are valid")
    }

    pub fn with_hyper(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(config_err!("learning rate must be positive, got {lr}"));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(config_err!("betas must lie in [0, 1), got ({beta1}, {beta2})"));
        }
        if !(epsilon > 0.0) {
            return Err(config_err!("epsilon must be positive, got {epsilon}"));
        }
        Ok(AdamState {
            lr,
            beta1,
            beta2,
            epsilon,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn moment_names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    /// Restores a saved state (checkpoint loading).
    pub fn restore(
        &mut self,
        step: u64,
        moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    ) -> Result<()> {
        if moments.values().any(|(m, v)| m.len() != v.len()) {
            return Err(Error::Usage("moment buffers of unequal length".into()));
        }
        self.step = step;
        self.moments = moments;
        Ok(())
    }
}

/// One Adam update over every parameter, then clears the gradients.
///
/// Every parameter must hold a gradient; nothing is modified otherwise.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
        return Err(Error::Usage(format!("parameter `{name}` has no gradient")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.epsilon);
    for (name, p) in params.iter_mut() {
        let grad = p.grad().expect("checked above").to_vec();
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
        if m.len() != grad.len() {
            return Err(Error::Usage(format!(
                "optimizer state for `{name}` has {} entries, parameter has {}",
                m.len(),
                grad.len()
            )));
        }
        let data = p.data_mut();
        for i in 0..grad.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("Adam produced {bad} in `{name}`")));
        }
        p.zero_grad();
    }
    Ok(())
}
