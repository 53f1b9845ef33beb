//! Temperature-softened distributions and the mutual distillation losses.
//!
//! All losses are batch means. In both KD losses the distribution on the
//! *other* network's side of the KL term is detached, so each loss only sends
//! gradient into the logits it is named after.

use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax_rows, Tape, Var};
use crate::error::{PqkError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Unit {
    #[default]
    Epochs,
    Iterations,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_half")]
    pub alpha: f64,
    #[serde(default = "default_half")]
    pub beta: f64,
    /// Length of the cross-entropy-only warm-up.
    #[serde(default)]
    pub warmup: u64,
    #[serde(default)]
    pub warmup_unit: Unit,
}

fn default_temperature() -> f64 {
    2.0
}

fn default_half() -> f64 {
    0.5
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            temperature: default_temperature(),
            alpha: 0.5,
            beta: 0.5,
            warmup: 0,
            warmup_unit: Unit::Epochs,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(PqkError::config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PqkError::config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// Whether training is still in the cross-entropy-only stage. `epoch` is
    /// one-based within Phase 2, `iteration` zero-based and global to Phase 2.
    pub fn in_warmup(&self, epoch: usize, iteration: u64) -> bool {
        match self.warmup_unit {
            Unit::Epochs => (epoch as u64) <= self.warmup,
            Unit::Iterations => iteration < self.warmup,
        }
    }

    /// `(alpha, beta)` in effect at the given point of Phase 2.
    pub fn weights_at(&self, epoch: usize, iteration: u64) -> LossWeights {
        if self.in_warmup(epoch, iteration) {
            LossWeights {
                alpha: 1.0,
                beta: 0.0,
                temperature: self.temperature,
            }
        } else {
            LossWeights {
                alpha: self.alpha,
                beta: self.beta,
                temperature: self.temperature,
            }
        }
    }
}

/// The effective loss weighting of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
}

impl LossWeights {
    pub fn cross_entropy_only() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.0,
            temperature: 1.0,
        }
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(PqkError::config(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

/// Row-wise `softmax(z / T)`.
pub fn soften(z: &Tensor, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    if z.rank() != 2 || z.shape()[1] < 2 {
        return Err(PqkError::shape(format!("soften needs [N, m] with m >= 2, got {:?}", z.shape())));
    }
    let inv = (1.0 / temperature) as f32;
    Ok(log_softmax_rows(&z.map(|v| v * inv)).map(f32::exp))
}

/// `log softmax(z / T)` on the tape.
pub fn log_soften(tape: &mut Tape, z: Var, temperature: f64) -> Result<Var> {
    check_temperature(temperature)?;
    let scaled = if temperature == 1.0 {
        z
    } else {
        tape.scalar_mul(z, (1.0 / temperature) as f32)
    };
    tape.log_softmax(scaled)
}

/// Mean cross-entropy of logits `z[N, m]` against class indices.
pub fn cross_entropy(tape: &mut Tape, z: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(z, labels)
}

/// `KL(σ(z_from; T) ‖ σ(z_to; T))`, batch mean. `z_from` is treated as a
/// constant target; only `z_to` receives gradient.
pub fn kl_divergence(tape: &mut Tape, z_from: Var, z_to: Var, temperature: f64) -> Result<Var> {
    check_temperature(temperature)?;
    let from = tape.value(z_from);
    if from.shape() != tape.value(z_to).shape() {
        return Err(PqkError::shape(format!(
            "kl_divergence: {:?} vs {:?}",
            from.shape(),
            tape.value(z_to).shape()
        )));
    }
    let from = from.clone();
    tape.soft_kl(&from, z_to, temperature)
}

/// `α·CE(z_own, y) + β·T²·KL(z_other ‖ z_own)`; shared by both KD losses.
fn kd_loss(tape: &mut Tape, z_own: Var, z_other: Var, labels: &[usize], w: LossWeights) -> Result<Var> {
    let ce = cross_entropy(tape, z_own, labels)?;
    if w.beta == 0.0 {
        if w.alpha == 1.0 {
            return Ok(ce);
        }
        return Ok(tape.scalar_mul(ce, w.alpha as f32));
    }
    let t = w.temperature;
    let kl = kl_divergence(tape, z_other, z_own, t)?;
    let kl = tape.scalar_mul(kl, (w.beta * t * t) as f32);
    if w.alpha == 0.0 {
        return Ok(kl);
    }
    let ce = tape.scalar_mul(ce, w.alpha as f32);
    tape.add(ce, kl)
}

/// Student distillation loss: cross-entropy plus `T²·KL(teacher ‖ student)`.
pub fn kd_loss_student(
    tape: &mut Tape,
    z_student: Var,
    z_teacher: Var,
    labels: &[usize],
    w: LossWeights,
) -> Result<Var> {
    kd_loss(tape, z_student, z_teacher, labels, w)
}

/// Teacher distillation loss: cross-entropy plus `T²·KL(student ‖ teacher)`.
pub fn kd_loss_teacher(
    tape: &mut Tape,
    z_teacher: Var,
    z_student: Var,
    labels: &[usize],
    w: LossWeights,
) -> Result<Var> {
    kd_loss(tape, z_teacher, z_student, labels, w)
}
