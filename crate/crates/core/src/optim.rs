//! Adam with decoupled weight decay, and a reduce-on-plateau schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type ParamSet = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Updates every parameter in `names` (all of `params` when `None`).
    /// Weight decay `p ← p − lr·wd·p` is applied before the Adam delta.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &Gradients, names: Option<&[String]>) -> Result<()> {
        let keys: Vec<String> = match names {
            Some(n) => n.to_vec(),
            None => params.keys().cloned().collect(),
        };
        for k in &keys {
            if !grads.contains_key(k) {
                return Err(Error::MissingGradient(k.clone()));
            }
            if !params.contains_key(k) {
                return Err(Error::InvalidArgument(format!("unknown parameter `{k}`")));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for k in &keys {
            let p = params.get_mut(k).expect("checked above");
            let g = &grads[k];
            if g.shape() != p.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            let m = self
                .first
                .entry(k.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .second
                .entry(k.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                pd[i] -= lr * weight_decay * pd[i];
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Divides the learning rate by `factor` whenever the monitored loss has not
/// improved for `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    pub patience: usize,
    pub factor: f64,
    best: f64,
    bad_epochs: usize,
    drops: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlateauEvent {
    Improved,
    Waiting,
    Drop,
}

impl PlateauSchedule {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            patience,
            factor,
            best: f64::INFINITY,
            bad_epochs: 0,
            drops: 0,
        }
    }

    pub fn drops(&self) -> usize {
        self.drops
    }

    pub fn observe(&mut self, loss: f64) -> PlateauEvent {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            return PlateauEvent::Improved;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            self.drops += 1;
            PlateauEvent::Drop
        } else {
            PlateauEvent::Waiting
        }
    }
}
