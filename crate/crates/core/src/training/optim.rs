//! SGD with Nesterov momentum and a step-decay schedule.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Gradients;
use crate::linalg::Matrix;

use super::model::ParamSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// Steps at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.05,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            milestones: Vec::new(),
            lr_decay: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("weight decay must be >= 0 and lr decay > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub cfg: OptimConfig,
    pub step: usize,
    velocity: BTreeMap<String, Matrix<f64>>,
    decayed: BTreeSet<String>,
}

impl OptimState {
    /// `decayed` names the parameters that receive weight decay.
    pub fn new(cfg: OptimConfig, decayed: impl IntoIterator<Item = String>) -> Result<Self> {
        cfg.validate()?;
        Ok(OptimState {
            cfg,
            step: 0,
            velocity: BTreeMap::new(),
            decayed: decayed.into_iter().collect(),
        })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self.cfg.milestones.iter().filter(|&&m| step >= m).count();
        self.cfg.lr * self.cfg.lr_decay.powi(passed as i32)
    }

    /// One scheduled update of the parameters named in `trainable`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, trainable: &[String]) -> Result<()> {
        let lr = self.lr_at(self.step);
        self.step_with_lr(params, grads, trainable, lr)?;
        self.step += 1;
        Ok(())
    }

    /// The update rule at an explicit learning rate. With `lr = 0` the
    /// parameters are left untouched bit for bit; momentum still accumulates.
    pub fn step_with_lr(&mut self, params: &mut ParamSet, grads: &Gradients, trainable: &[String], lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        for name in trainable {
            let Some(p) = params.get_mut(name) else { continue };
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Gradient { param: name.clone() })?;
            let mut g = g.clone();
            if self.decayed.contains(name) && self.cfg.weight_decay > 0.0 {
                g = g.add(&p.scale(self.cfg.weight_decay))?;
            }
            let mu = self.cfg.momentum;
            let v = match self.velocity.get(name) {
                Some(v) => v.scale(mu).add(&g)?,
                None => g.clone(),
            };
            let update = if self.cfg.nesterov { g.add(&v.scale(mu))? } else { v.clone() };
            self.velocity.insert(name.clone(), v);
            if lr > 0.0 {
                *p = p.sub(&update.scale(lr))?;
            }
        }
        Ok(())
    }
}
