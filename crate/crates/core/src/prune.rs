//! Magnitude-based unstructured pruning: the cubic sparsity ramp and mask
//! maintenance during Phase 1.

use serde::{Deserialize, Serialize};

use crate::error::{PqkError, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Binary keep/prune gate for one weight tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl Mask {
    pub fn ones(shape: &[usize]) -> Self {
        Mask {
            shape: shape.to_vec(),
            keep: vec![true; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Mask {
            shape: shape.to_vec(),
            keep: vec![false; shape.iter().product()],
        }
    }

    pub fn from_keep(shape: Vec<usize>, keep: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != keep.len() {
            return Err(PqkError::shape(format!(
                "mask shape {shape:?} does not match {} entries",
                keep.len()
            )));
        }
        Ok(Mask { shape, keep })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.keep.len()
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Fraction of pruned entries, `1 - mean(M)`.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.kept() as f64 / self.numel() as f64
    }

    /// 0/1 tensor of the mask.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Eight entries per byte, entry `i` in bit `i % 8` of byte `i / 8`.
    pub fn pack_bits(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.keep.len().div_ceil(8)];
        for (i, &k) in self.keep.iter().enumerate() {
            if k {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn unpack_bits(shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if bytes.len() != n.div_ceil(8) {
            return Err(PqkError::Corrupt(format!(
                "bit-packed mask of shape {shape:?} needs {} bytes, got {}",
                n.div_ceil(8),
                bytes.len()
            )));
        }
        let keep = (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(Mask { shape, keep })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneMode {
    /// Every prunable layer is pruned to the current ratio on its own.
    #[default]
    PerLayer,
    /// One magnitude threshold across all prunable layers.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSchedule {
    #[serde(default)]
    pub initial_ratio: f64,
    pub target_ratio: f64,
    #[serde(default)]
    pub initial_epoch: usize,
    /// Ramp length `n` in epochs.
    pub ramp_epochs: usize,
    /// Mask recomputation period in iterations.
    #[serde(default = "default_update_period")]
    pub update_period: usize,
    #[serde(default)]
    pub mode: PruneMode,
}

fn default_update_period() -> usize {
    32
}

impl PruneSchedule {
    pub fn new(target_ratio: f64, ramp_epochs: usize) -> Self {
        PruneSchedule {
            initial_ratio: 0.0,
            target_ratio,
            initial_epoch: 0,
            ramp_epochs,
            update_period: default_update_period(),
            mode: PruneMode::PerLayer,
        }
    }

    /// No pruning at all.
    pub fn disabled() -> Self {
        Self::new(0.0, 1)
    }

    pub fn validate(&self) -> Result<()> {
        let (pi, pt) = (self.initial_ratio, self.target_ratio);
        if !(0.0..1.0).contains(&pi) || !(0.0..1.0).contains(&pt) || pi > pt {
            return Err(PqkError::config(format!(
                "pruning ratios must satisfy 0 <= initial ({pi}) <= target ({pt}) < 1"
            )));
        }
        if self.ramp_epochs == 0 {
            return Err(PqkError::config("pruning ramp length must be at least 1 epoch"));
        }
        if self.update_period == 0 {
            return Err(PqkError::config("mask update period must be at least 1 iteration"));
        }
        Ok(())
    }

    /// Sparsity target at epoch `c`, ramping cubically from the initial to
    /// the target ratio over `[c0, c0 + n]` and clamped outside it.
    pub fn current_ratio(&self, epoch: usize) -> f64 {
        let (c0, n) = (self.initial_epoch as f64, self.ramp_epochs as f64);
        let progress = ((epoch as f64 - c0) / n).clamp(0.0, 1.0);
        if progress == 0.0 {
            return self.initial_ratio;
        }
        self.target_ratio + (self.initial_ratio - self.target_ratio) * (1.0 - progress).powi(3)
    }
}

/// Number of entries pruned out of `numel` at `ratio`.
pub fn prune_count(ratio: f64, numel: usize) -> usize {
    // The guard keeps decimal ratios such as 0.29 * 100 from flooring one short.
    (((ratio * numel as f64) + 1e-9).floor() as usize).min(numel)
}

/// Prunes the `floor(ratio * numel)` smallest-magnitude entries; ties go to the
/// lower flat index first.
pub fn compute_mask(w: &Tensor, ratio: f64) -> Result<Mask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(PqkError::config(format!("pruning ratio {ratio} outside [0, 1)")));
    }
    let n_prune = prune_count(ratio, w.numel());
    let mut keep = vec![true; w.numel()];
    if n_prune > 0 {
        let mut order: Vec<usize> = (0..w.numel()).collect();
        let data = w.data();
        let cmp = |a: &usize, b: &usize| data[*a].abs().total_cmp(&data[*b].abs()).then(a.cmp(b));
        order.select_nth_unstable_by(n_prune - 1, cmp);
        for &i in &order[..n_prune] {
            keep[i] = false;
        }
    }
    Ok(Mask {
        shape: w.shape().to_vec(),
        keep,
    })
}

/// Masks for several layers under one shared magnitude threshold. The order
/// is `(|w|, layer index, flat index)`.
pub fn compute_masks_global(weights: &[&Tensor], ratio: f64) -> Result<Vec<Mask>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(PqkError::config(format!("pruning ratio {ratio} outside [0, 1)")));
    }
    let total: usize = weights.iter().map(|w| w.numel()).sum();
    let n_prune = prune_count(ratio, total);
    let mut masks: Vec<Mask> = weights.iter().map(|w| Mask::ones(w.shape())).collect();
    if n_prune > 0 {
        let mut order: Vec<(usize, usize)> = weights
            .iter()
            .enumerate()
            .flat_map(|(l, w)| (0..w.numel()).map(move |i| (l, i)))
            .collect();
        let cmp = |a: &(usize, usize), b: &(usize, usize)| {
            let va = weights[a.0].data()[a.1].abs();
            let vb = weights[b.0].data()[b.1].abs();
            va.total_cmp(&vb).then(a.cmp(b))
        };
        order.select_nth_unstable_by(n_prune - 1, cmp);
        for &(l, i) in &order[..n_prune] {
            masks[l].keep[i] = false;
        }
    }
    Ok(masks)
}

pub fn apply_mask(w: &Tensor, mask: &Mask) -> Result<Tensor> {
    if w.shape() != mask.shape() {
        return Err(PqkError::shape(format!(
            "mask shape {:?} does not match weight shape {:?}",
            mask.shape(),
            w.shape()
        )));
    }
    Ok(Tensor::from_parts(
        w.shape().to_vec(),
        w.data()
            .iter()
            .zip(&mask.keep)
            .map(|(&v, &k)| if k { v } else { 0.0 })
            .collect(),
    ))
}

/// Recomputes every prunable layer's mask from its latent weights when
/// `iteration` (zero-based, within the epoch) is a multiple of the update
/// period. Returns whether the masks were recomputed.
pub fn maybe_update_masks(
    model: &mut Model,
    sched: &PruneSchedule,
    epoch: usize,
    iteration: usize,
) -> Result<bool> {
    if iteration % sched.update_period != 0 {
        return Ok(false);
    }
    let ratio = sched.current_ratio(epoch);
    let masks = match sched.mode {
        PruneMode::PerLayer => model
            .layers()
            .iter()
            .map(|l| compute_mask(l.weight(), ratio))
            .collect::<Result<Vec<_>>>()?,
        PruneMode::Global => {
            let weights: Vec<&Tensor> = model.layers().iter().map(|l| l.weight()).collect();
            compute_masks_global(&weights, ratio)?
        }
    };
    model.set_masks(masks)?;
    Ok(true)
}
