//! AdamW with decoupled weight decay, and polynomial LR decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MultiTaskNet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment buffers of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One AdamW update at step `t` (1-based). Decay is applied to the
/// pre-update value, separately from the moment-based step.
pub fn adamw_step(param: &mut Tensor, grad: &[f32], moments: &mut Moments, t: u64, lr: f64, hp: &AdamW) -> Result<()> {
    let n = param.numel();
    if grad.len() != n || moments.m.len() != n || moments.v.len() != n {
        return Err(Error::Dimension(format!(
            "AdamW: parameter of {n}, gradient of {}, moments of {}/{}",
            grad.len(),
            moments.m.len(),
            moments.v.len()
        )));
    }
    if t == 0 {
        return Err(Error::Parameter("AdamW step counter starts at 1".into()));
    }
    let bc1 = 1.0 - hp.beta1.powf(t as f64);
    let bc2 = 1.0 - hp.beta2.powf(t as f64);
    let data = param.data_mut();
    for i in 0..n {
        let g = f64::from(grad[i]);
        let theta = f64::from(data[i]);
        let m = hp.beta1 * moments.m[i] + (1.0 - hp.beta1) * g;
        let v = hp.beta2 * moments.v[i] + (1.0 - hp.beta2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        let update = (m / bc1) / ((v / bc2).sqrt() + hp.eps);
        let next = theta - lr * hp.weight_decay * theta - lr * update;
        data[i] = next as f32;
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameter after AdamW step".into()));
    }
    Ok(())
}

/// `base · (1 - step/total)^power`.
pub fn poly_lr(base_lr: f64, step: u64, total_steps: u64, power: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Parameter(format!(
            "poly_lr step {step} outside [0, {total_steps}]"
        )));
    }
    Ok(base_lr * (1.0 - step as f64 / total_steps as f64).powf(power))
}

/// Per-parameter moments plus the shared step counter.
#[derive(Debug, Clone, Default)]
pub struct OptimState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Apply one AdamW step to every trainable parameter of `net` using
    /// its accumulated gradient. Buffers of parameters that are no longer
    /// trainable are dropped.
    pub fn step_net(&mut self, net: &mut MultiTaskNet, hp: &AdamW, lr_for: impl Fn(&str) -> f64) -> Result<()> {
        self.step += 1;
        let trainable: Vec<String> = net
            .names()
            .iter()
            .filter(|n| net.is_trainable(n))
            .cloned()
            .collect();
        self.moments.retain(|k, _| trainable.contains(k));
        for (name, t) in net.tensors_mut() {
            if !t.requires_grad() {
                continue;
            }
            let grad: Vec<f32> = t.grad().expect("trainable parameter has a gradient").to_vec();
            let mom = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments::zeros(grad.len()));
            adamw_step(t, &grad, mom, self.step, lr_for(name), hp)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::NonFinite(format!("parameter {name} after AdamW step")),
                    other => other,
                })?;
        }
        Ok(())
    }
}
