//! Uniform symmetric per-layer weight quantization with a learnable step size.
//!
//! Codes live in `[-(2^(k-1) - 1), 2^(k-1) - 1]`; rounding is half-to-even.
//! The differentiable composition lives on the tape as
//! [`Tape::fake_quantize`](crate::autograd::Tape::fake_quantize).

use serde::{Deserialize, Serialize};

use crate::error::{PqkError, Result};
use crate::tensor::Tensor;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 8;
/// Lower bound applied to a step size that would otherwise be zero or negative.
pub const STEP_FLOOR: f32 = 1e-8;
pub const DEFAULT_STEP_LR_SCALE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub step: f32,
    pub trainable: bool,
    /// Multiplier on the model learning rate used for `step`.
    pub step_lr_scale: f64,
}

impl QuantSpec {
    pub fn new(bits: u32, step: f32) -> Result<Self> {
        let spec = QuantSpec {
            bits,
            step,
            trainable: true,
            step_lr_scale: DEFAULT_STEP_LR_SCALE,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_BITS..=MAX_BITS).contains(&self.bits) {
            return Err(PqkError::config(format!(
                "bit width {} outside [{MIN_BITS}, {MAX_BITS}]",
                self.bits
            )));
        }
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(PqkError::config(format!(
                "step size must be positive and finite, got {}",
                self.step
            )));
        }
        Ok(())
    }

    /// Largest code magnitude, `2^(k-1) - 1`.
    pub fn max_code(&self) -> i32 {
        max_code(self.bits)
    }
}

pub fn max_code(bits: u32) -> i32 {
    (1 << (bits - 1)) - 1
}

/// Integer codes of a quantized tensor, one `i8` per element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntCodeTensor {
    shape: Vec<usize>,
    codes: Vec<i8>,
}

impl IntCodeTensor {
    pub fn new(shape: Vec<usize>, codes: Vec<i8>) -> Result<Self> {
        if shape.iter().product::<usize>() != codes.len() {
            return Err(PqkError::shape(format!(
                "code tensor shape {shape:?} does not match {} codes",
                codes.len()
            )));
        }
        Ok(IntCodeTensor { shape, codes })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn into_codes(self) -> Vec<i8> {
        self.codes
    }
}

pub fn quantize_scalar(w: f32, step: f32, bits: u32) -> i8 {
    let q = max_code(bits) as f32;
    (w / step).round_ties_even().clamp(-q, q) as i8
}

pub fn quantize(w: &Tensor, spec: &QuantSpec) -> Result<IntCodeTensor> {
    spec.validate()?;
    let codes = w
        .data()
        .iter()
        .map(|&v| quantize_scalar(v, spec.step, spec.bits))
        .collect();
    Ok(IntCodeTensor {
        shape: w.shape().to_vec(),
        codes,
    })
}

pub fn dequantize(codes: &IntCodeTensor, spec: &QuantSpec) -> Result<Tensor> {
    spec.validate()?;
    let q = spec.max_code();
    if let Some(bad) = codes.codes.iter().find(|&&c| (c as i32).abs() > q) {
        return Err(PqkError::Corrupt(format!(
            "code {bad} outside the {}-bit range [-{q}, {q}]",
            spec.bits
        )));
    }
    let data = codes.codes.iter().map(|&c| c as f32 * spec.step).collect();
    Ok(Tensor::from_parts(codes.shape.clone(), data))
}

/// Forward value of the fake-quantize node, without recording a gradient.
pub fn fake_quantize(w: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    dequantize(&quantize(w, spec)?, spec)
}

/// Step size covering the largest weight magnitude with the top code.
pub fn init_step_size(w: &Tensor, bits: u32) -> f32 {
    let max = w.max_abs();
    if max == 0.0 {
        STEP_FLOOR
    } else {
        (max / max_code(bits) as f32).max(STEP_FLOOR)
    }
}
