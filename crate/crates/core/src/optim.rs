//! SGD with momentum, weight decay, step decay, and element-wise update masks
//! so that one parameter tensor can be split between two update rules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::distill::Unit;
use crate::error::{PqkError, Result};
use crate::quant::STEP_FLOOR;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Points (counted from the start of each phase) after which the
    /// learning rate is multiplied by `decay`.
    #[serde(default)]
    pub milestones: Vec<u64>,
    #[serde(default)]
    pub milestone_unit: Unit,
    #[serde(default = "default_decay")]
    pub decay: f64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    1e-5
}

fn default_decay() -> f64 {
    0.1
}

impl SgdConfig {
    pub fn new(lr: f64) -> Self {
        SgdConfig {
            lr,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            milestones: Vec::new(),
            milestone_unit: Unit::Epochs,
            decay: default_decay(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(PqkError::config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(PqkError::config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(PqkError::config("weight decay must be >= 0"));
        }
        if !(self.decay > 0.0) {
            return Err(PqkError::config("learning-rate decay factor must be > 0"));
        }
        Ok(())
    }

    /// Learning rate for 1-based `epoch` and 0-based `iteration` of a phase.
    pub fn lr_at(&self, epoch: usize, iteration: u64) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| match self.milestone_unit {
                Unit::Epochs => epoch as u64 > m,
                Unit::Iterations => iteration >= m,
            })
            .count();
        self.lr * self.decay.powi(passed as i32)
    }
}

/// Per-step hyperparameters handed to [`OptimizerState::update`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

/// Momentum buffers keyed by parameter name, plus a step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    buffers: BTreeMap<String, Vec<f32>>,
    steps: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(buffers: BTreeMap<String, Vec<f32>>, steps: u64) -> Self {
        OptimizerState { buffers, steps }
    }

    pub fn buffers(&self) -> &BTreeMap<String, Vec<f32>> {
        &self.buffers
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn tick(&mut self) {
        self.steps += 1;
    }

    /// `v = μv + (g + λw); w -= η v`, applied only where `select` is true
    /// (everywhere when `None`). Unselected entries keep both their value
    /// and their momentum.
    pub fn update(
        &mut self,
        key: &str,
        param: &mut Tensor,
        grad: &Tensor,
        p: StepParams,
        select: Option<&[bool]>,
    ) -> Result<()> {
        param.check_same_shape(grad)?;
        if let Some(s) = select {
            if s.len() != param.numel() {
                return Err(PqkError::shape(format!(
                    "update mask of {} entries for parameter {key} with {}",
                    s.len(),
                    param.numel()
                )));
            }
        }
        let buf = self
            .buffers
            .entry(key.to_string())
            .or_insert_with(|| vec![0.0; param.numel()]);
        if buf.len() != param.numel() {
            return Err(PqkError::shape(format!(
                "momentum buffer for {key} has {} entries, parameter has {}",
                buf.len(),
                param.numel()
            )));
        }
        for (i, ((w, &g), v)) in param.data_mut().iter_mut().zip(grad.data()).zip(buf.iter_mut()).enumerate() {
            if let Some(s) = select {
                if !s[i] {
                    continue;
                }
            }
            *v = p.momentum * *v + g + p.weight_decay * *w;
            *w -= p.lr * *v;
        }
        Ok(())
    }

    /// Step-size update: plain momentum SGD kept above the step floor.
    pub fn update_step_size(&mut self, key: &str, step: &mut f32, grad: f32, lr: f32, momentum: f32) {
        let buf = self.buffers.entry(key.to_string()).or_insert_with(|| vec![0.0]);
        buf[0] = momentum * buf[0] + grad;
        *step = (*step - lr * buf[0]).max(STEP_FLOOR);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(lr: f32, momentum: f32, wd: f32) -> StepParams {
        StepParams {
            lr,
            momentum,
            weight_decay: wd,
        }
    }

    #[test]
    fn plain_sgd_step() {
        let mut opt = OptimizerState::new();
        let mut w = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.5, 0.25]).unwrap();
        opt.update("w", &mut w, &g, params(0.1, 0.0, 0.0), None).unwrap();
        assert_eq!(w.data(), &[0.95, -2.025]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt = OptimizerState::new();
        let mut w = Tensor::new(vec![1], vec![0.0]).unwrap();
        let g = Tensor::new(vec![1], vec![1.0]).unwrap();
        opt.update("w", &mut w, &g, params(1.0, 0.5, 0.0), None).unwrap();
        opt.update("w", &mut w, &g, params(1.0, 0.5, 0.0), None).unwrap();
        // v1 = 1, v2 = 1.5
        assert_eq!(w.data(), &[-2.5]);
    }

    #[test]
    fn unselected_entries_are_untouched() {
        let mut opt = OptimizerState::new();
        let mut w = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = Tensor::new(vec![3], vec![9.0, 9.0, 9.0]).unwrap();
        let sel = [true, false, true];
        for _ in 0..3 {
            opt.update("w", &mut w, &g, params(0.1, 0.9, 0.1), Some(&sel)).unwrap();
        }
        assert_eq!(w.data()[1], 2.0);
        assert_eq!(opt.buffers()["w"][1], 0.0);
        assert!(w.data()[0] < 1.0);
    }

    #[test]
    fn step_size_floor() {
        let mut opt = OptimizerState::new();
        let mut s = 0.01;
        opt.update_step_size("s", &mut s, 1e6, 1.0, 0.0);
        assert_eq!(s, STEP_FLOOR);
    }

    #[test]
    fn milestone_decay() {
        let mut c = SgdConfig::new(0.1);
        c.milestones = vec![2, 4];
        assert_eq!(c.lr_at(1, 0), 0.1);
        assert_eq!(c.lr_at(2, 0), 0.1);
        assert!((c.lr_at(3, 0) - 0.01).abs() < 1e-12);
        assert!((c.lr_at(5, 0) - 0.001).abs() < 1e-12);
        c.milestone_unit = Unit::Iterations;
        assert_eq!(c.lr_at(1, 1), 0.1);
        assert!((c.lr_at(1, 2) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(SgdConfig::new(0.1).validate().is_ok());
        assert!(SgdConfig::new(0.0).validate().is_err());
        let mut c = SgdConfig::new(0.1);
        c.momentum = 1.0;
        assert!(c.validate().is_err());
    }
}
