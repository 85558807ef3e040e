use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::ParamSet;
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0005,
        }
    }
}

/// Moment estimates of one tensor. Kept in `f64`; the parameter itself is
/// rounded to `f32` after each update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamSlot {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update with L2-coupled weight decay.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, slot: &mut AdamSlot, lr: f64, cfg: &AdamConfig) -> Result<()> {
    let n = param.numel();
    if grad.shape() != param.shape() || slot.m.len() != n || slot.v.len() != n {
        return Err(Error::Dimension(format!(
            "adam: parameter {:?}, gradient {:?}, state {}",
            param.shape(),
            grad.shape(),
            slot.m.len()
        )));
    }
    slot.step += 1;
    let t = slot.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..n {
        let p = param.data()[i] as f64;
        let g = grad.data()[i] as f64 + cfg.weight_decay * p;
        let m = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
        slot.m[i] = m;
        slot.v[i] = v;
        let m_hat = m / c1;
        let v_hat = v / c2;
        param.data_mut()[i] = (p - lr * m_hat / (v_hat.sqrt() + cfg.eps)) as f32;
    }
    param.ensure_finite("adam update")
}

/// Adam state for the named tensors of one parameter set.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub cfg: AdamConfig,
    slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            slots: BTreeMap::new(),
        }
    }

    /// Drops the state of every tensor whose name starts with `prefix`.
    pub fn reset(&mut self, prefix: &str) {
        self.slots.retain(|k, _| !k.starts_with(prefix));
    }

    /// Updates the tensors of `params` named in `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[(String, Tensor)], lr: f64) -> Result<()> {
        let mut named = params.named_tensors_mut();
        for (name, g) in grads {
            let (_, p) = named
                .iter_mut()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Contract(format!("no parameter named `{name}`")))?;
            let slot = self
                .slots
                .entry(name.clone())
                .or_insert_with(|| AdamSlot::new(p.numel()));
            if slot.m.len() != p.numel() {
                *slot = AdamSlot::new(p.numel());
            }
            adam_step(p, g, slot, lr, &self.cfg)?;
        }
        Ok(())
    }
}
