//! Networks built from prunable, quantizable layers, with two forward paths
//! over one set of latent weights:
//!
//! * **student**: every layer uses `fake_quantize(w) ⊙ M`, batch norm reads
//!   the student statistics;
//! * **teacher**: every layer uses the full-precision latent `w` with no mask,
//!   batch norm reads its own statistics. Only available in Phase 2.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, BnMode, Tape, Var};
use crate::error::{PqkError, Result};
use crate::prune::Mask;
use crate::quant::{self, QuantSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    /// Stem conv, 2x2 average pool, residual blocks, global pool, linear head.
    Res8,
    /// Fully connected network with ReLU hidden layers.
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub kind: ArchKind,
    /// Channel count of every conv (res8) or hidden layer size (mlp).
    pub width: usize,
    /// Residual blocks (res8) or hidden layers (mlp).
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    /// Per-example input shape: `[C, H, W]` for res8, anything for mlp.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

fn default_blocks() -> usize {
    3
}

fn default_bn_eps() -> f64 {
    1e-5
}

fn default_bn_momentum() -> f64 {
    0.1
}

impl ArchConfig {
    pub fn res8(width: usize, input_shape: [usize; 3], classes: usize) -> Self {
        ArchConfig {
            kind: ArchKind::Res8,
            width,
            blocks: default_blocks(),
            input_shape: input_shape.to_vec(),
            classes,
            bn_eps: default_bn_eps(),
            bn_momentum: default_bn_momentum(),
        }
    }

    pub fn mlp(input_dim: usize, hidden: usize, classes: usize) -> Self {
        ArchConfig {
            kind: ArchKind::Mlp,
            width: hidden,
            blocks: 2,
            input_shape: vec![input_dim],
            classes,
            bn_eps: default_bn_eps(),
            bn_momentum: default_bn_momentum(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.input_shape.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
            return Err(PqkError::config(format!(
                "architecture needs positive width and input dims, got width {} input {:?}",
                self.width, self.input_shape
            )));
        }
        if self.classes < 2 {
            return Err(PqkError::config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(PqkError::config("batch-norm eps must be > 0 and momentum in [0, 1]"));
        }
        match self.kind {
            ArchKind::Res8 => {
                if self.input_shape.len() != 3 || self.input_shape[1] < 2 || self.input_shape[2] < 2 {
                    return Err(PqkError::config(format!(
                        "res8 needs input [C, H, W] with H, W >= 2, got {:?}",
                        self.input_shape
                    )));
                }
                if self.blocks == 0 {
                    return Err(PqkError::config("res8 needs at least one residual block"));
                }
            }
            ArchKind::Mlp => {
                if self.blocks == 0 {
                    return Err(PqkError::config("mlp needs at least one hidden layer"));
                }
            }
        }
        Ok(())
    }

    pub fn input_numel(&self) -> usize {
        self.input_shape.iter().product()
    }
}

/// Quantization settings shared by all layers of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    #[serde(default = "default_bits")]
    pub bits: u32,
    /// When false the student path skips fake quantization entirely.
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_step_lr_scale")]
    pub step_lr_scale: f64,
}

fn default_bits() -> u32 {
    8
}

fn default_true() -> bool {
    true
}

fn default_step_lr_scale() -> f64 {
    quant::DEFAULT_STEP_LR_SCALE
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            bits: default_bits(),
            enabled: true,
            step_lr_scale: default_step_lr_scale(),
        }
    }
}

impl QuantConfig {
    pub fn bits(bits: u32) -> Self {
        QuantConfig {
            bits,
            ..Self::default()
        }
    }

    pub fn disabled() -> Self {
        QuantConfig {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(quant::MIN_BITS..=quant::MAX_BITS).contains(&self.bits) {
            return Err(PqkError::config(format!(
                "bit width {} outside [{}, {}]",
                self.bits,
                quant::MIN_BITS,
                quant::MAX_BITS
            )));
        }
        if !(self.step_lr_scale >= 0.0) {
            return Err(PqkError::config("step-size learning-rate scale must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv2d { stride: usize, padding: usize },
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Path {
    Student,
    Teacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Phase1,
    Phase2,
    Finetune,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Phase1 => "1",
            Phase::Phase2 => "2",
            Phase::Finetune => "finetune",
        }
    }
}

/// A conv or linear layer: latent weights, optional bias, mask and step size.
#[derive(Debug, Clone, PartialEq)]
pub struct PqkLayer {
    name: String,
    kind: LayerKind,
    weight: Tensor,
    bias: Option<Tensor>,
    mask: Mask,
    quant: QuantSpec,
}

impl PqkLayer {
    pub fn new(name: &str, kind: LayerKind, weight: Tensor, bias: Option<Tensor>, quant: QuantSpec) -> Self {
        let mask = Mask::ones(weight.shape());
        PqkLayer {
            name: name.to_string(),
            kind,
            weight,
            bias,
            mask,
            quant,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Tensor {
        &mut self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Tensor> {
        self.bias.as_mut()
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn quant(&self) -> &QuantSpec {
        &self.quant
    }

    pub fn quant_mut(&mut self) -> &mut QuantSpec {
        &mut self.quant
    }

    pub fn set_mask(&mut self, mask: Mask) -> Result<()> {
        if mask.shape() != self.weight.shape() {
            return Err(PqkError::shape(format!(
                "mask {:?} does not fit layer {} with weight {:?}",
                mask.shape(),
                self.name,
                self.weight.shape()
            )));
        }
        self.mask = mask;
        Ok(())
    }

    /// The dequantized, masked weights the student path uses.
    pub fn student_weight(&self, quantize: bool) -> Result<Tensor> {
        let w = if quantize {
            quant::fake_quantize(&self.weight, &self.quant)?
        } else {
            self.weight.clone()
        };
        crate::prune::apply_mask(&w, &self.mask)
    }
}

/// Affine parameters and running statistics of one batch-norm path.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BnParams {
    pub fn new(channels: usize) -> Self {
        BnParams {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
        }
    }

    fn absorb(&mut self, stats: &BatchStats, momentum: f32) {
        let unbias = if stats.count > 1 {
            stats.count as f32 / (stats.count - 1) as f32
        } else {
            1.0
        };
        for (r, &m) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - momentum) * *r + momentum * v * unbias;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    name: String,
    student: BnParams,
    teacher: Option<BnParams>,
}

impl BatchNormLayer {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNormLayer {
            name: name.to_string(),
            student: BnParams::new(channels),
            teacher: None,
        }
    }

    pub fn from_parts(name: &str, student: BnParams, teacher: Option<BnParams>) -> Self {
        BatchNormLayer {
            name: name.to_string(),
            student,
            teacher,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn channels(&self) -> usize {
        self.student.gamma.numel()
    }

    pub fn params(&self, path: Path) -> Option<&BnParams> {
        match path {
            Path::Student => Some(&self.student),
            Path::Teacher => self.teacher.as_ref(),
        }
    }

    pub fn params_mut(&mut self, path: Path) -> Option<&mut BnParams> {
        match path {
            Path::Student => Some(&mut self.student),
            Path::Teacher => self.teacher.as_mut(),
        }
    }
}

/// Parameter vars of one forward pass, for reading gradients back.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub path: Path,
    pub logits: Var,
    /// Latent weight leaf of every layer, in layer order.
    pub weights: Vec<Var>,
    pub biases: Vec<Option<Var>>,
    /// Step-size leaf of every layer when step sizes are being learned.
    pub steps: Vec<Option<Var>>,
    pub gammas: Vec<Var>,
    pub betas: Vec<Var>,
    /// Batch statistics per norm layer (training mode only).
    pub bn_stats: Vec<BatchStats>,
}

/// Counts of every parameter group of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub prunable: usize,
    pub biases: usize,
    /// Affine batch-norm parameters of one path.
    pub batchnorm: usize,
    pub step_sizes: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.prunable + self.biases + self.batchnorm + self.step_sizes
    }
}

#[derive(Debug, Default)]
struct Counter(AtomicU64);

impl Clone for Counter {
    fn clone(&self) -> Self {
        Counter(AtomicU64::new(self.0.load(Ordering::Relaxed)))
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    arch: ArchConfig,
    layers: Vec<PqkLayer>,
    norms: Vec<BatchNormLayer>,
    phase: Phase,
    quantize: bool,
    quant_reads: Counter,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.layers == other.layers
            && self.norms == other.norms
            && self.phase == other.phase
            && self.quantize == other.quantize
    }
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Builds a freshly initialized model in Phase 1.
pub fn build_model(arch: &ArchConfig, quant_cfg: &QuantConfig, seed: u64) -> Result<Model> {
    arch.validate()?;
    quant_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut norms = Vec::new();
    let bits = quant_cfg.bits;
    let layer = |rng: &mut ChaCha8Rng, name: &str, kind: LayerKind, shape: &[usize], bias: bool| -> Result<PqkLayer> {
        let fan_in: usize = shape[1..].iter().product();
        let w = kaiming_uniform(rng, shape, fan_in);
        let spec = QuantSpec {
            bits,
            step: quant::init_step_size(&w, bits),
            trainable: true,
            step_lr_scale: quant_cfg.step_lr_scale,
        };
        let b = bias.then(|| Tensor::zeros(&[shape[0]]));
        Ok(PqkLayer::new(name, kind, w, b, spec))
    };
    let conv = LayerKind::Conv2d { stride: 1, padding: 1 };
    let width = arch.width;
    match arch.kind {
        ArchKind::Res8 => {
            let cin = arch.input_shape[0];
            layers.push(layer(&mut rng, "conv0", conv, &[width, cin, 3, 3], false)?);
            norms.push(BatchNormLayer::new("bn0", width));
            for b in 0..arch.blocks {
                for part in ["a", "b"] {
                    let name = format!("block{b}.conv{part}");
                    layers.push(layer(&mut rng, &name, conv, &[width, width, 3, 3], false)?);
                    norms.push(BatchNormLayer::new(&format!("block{b}.bn{part}"), width));
                }
            }
            layers.push(layer(&mut rng, "fc", LayerKind::Linear, &[arch.classes, width], true)?);
        }
        ArchKind::Mlp => {
            let mut fan_in = arch.input_numel();
            for h in 0..arch.blocks {
                layers.push(layer(&mut rng, &format!("fc{h}"), LayerKind::Linear, &[width, fan_in], true)?);
                fan_in = width;
            }
            let name = format!("fc{}", arch.blocks);
            layers.push(layer(&mut rng, &name, LayerKind::Linear, &[arch.classes, fan_in], true)?);
        }
    }
    Ok(Model {
        arch: arch.clone(),
        layers,
        norms,
        phase: Phase::Phase1,
        quantize: quant_cfg.enabled,
        quant_reads: Counter::default(),
    })
}

impl Model {
    /// Reassembles a model from stored parts (used by checkpoint loading).
    pub fn from_parts(
        arch: ArchConfig,
        layers: Vec<PqkLayer>,
        norms: Vec<BatchNormLayer>,
        phase: Phase,
        quantize: bool,
    ) -> Result<Model> {
        arch.validate()?;
        let reference = build_model(&arch, &QuantConfig::default(), 0)?;
        if reference.layers.len() != layers.len() || reference.norms.len() != norms.len() {
            return Err(PqkError::Corrupt(format!(
                "architecture expects {} layers and {} norms, found {} and {}",
                reference.layers.len(),
                reference.norms.len(),
                layers.len(),
                norms.len()
            )));
        }
        for (r, l) in reference.layers.iter().zip(&layers) {
            if r.weight.shape() != l.weight.shape() || r.bias.is_some() != l.bias.is_some() || r.kind != l.kind {
                return Err(PqkError::Corrupt(format!("layer {} does not match the architecture", l.name)));
            }
        }
        for (r, n) in reference.norms.iter().zip(&norms) {
            if r.channels() != n.channels() {
                return Err(PqkError::Corrupt(format!("norm {} does not match the architecture", n.name)));
            }
        }
        Ok(Model {
            arch,
            layers,
            norms,
            phase,
            quantize,
            quant_reads: Counter::default(),
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
    }

    pub fn quantize_enabled(&self) -> bool {
        self.quantize
    }

    /// Debug switch: student path without fake quantization.
    pub fn set_quantize(&mut self, enabled: bool) {
        self.quantize = enabled;
    }

    pub fn layers(&self) -> &[PqkLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [PqkLayer] {
        &mut self.layers
    }

    pub fn norms(&self) -> &[BatchNormLayer] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [BatchNormLayer] {
        &mut self.norms
    }

    pub fn masks(&self) -> Vec<Mask> {
        self.layers.iter().map(|l| l.mask.clone()).collect()
    }

    /// Replaces all masks at once; nothing changes if any mask has the wrong shape.
    pub fn set_masks(&mut self, masks: Vec<Mask>) -> Result<()> {
        if masks.len() != self.layers.len() {
            return Err(PqkError::shape(format!(
                "{} masks for {} layers",
                masks.len(),
                self.layers.len()
            )));
        }
        for (l, m) in self.layers.iter().zip(&masks) {
            if l.weight.shape() != m.shape() {
                return Err(PqkError::shape(format!("mask {:?} does not fit layer {}", m.shape(), l.name)));
            }
        }
        for (l, m) in self.layers.iter_mut().zip(masks) {
            l.mask = m;
        }
        Ok(())
    }

    pub fn step_sizes(&self) -> Vec<f32> {
        self.layers.iter().map(|l| l.quant.step).collect()
    }

    /// How many times the student path has read a layer's quantization spec.
    pub fn quant_reads(&self) -> u64 {
        self.quant_reads.0.load(Ordering::Relaxed)
    }

    pub fn has_teacher(&self) -> bool {
        self.norms.iter().all(|n| n.teacher.is_some())
    }

    /// Creates the teacher batch-norm set as a copy of the student set. A
    /// second call leaves the existing teacher set alone.
    pub fn clone_bn_for_teacher(&mut self) {
        for n in &mut self.norms {
            if n.teacher.is_none() {
                n.teacher = Some(n.student.clone());
            }
        }
    }

    /// Switches to Phase 2: builds the teacher batch norm and freezes step sizes.
    pub fn enter_phase2(&mut self) {
        self.clone_bn_for_teacher();
        for l in &mut self.layers {
            l.quant.trainable = false;
        }
        self.phase = Phase::Phase2;
    }

    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts {
            prunable: self.layers.iter().map(|l| l.weight.numel()).sum(),
            biases: self.layers.iter().filter_map(|l| l.bias.as_ref()).map(|b| b.numel()).sum(),
            batchnorm: self.norms.iter().map(|n| 2 * n.channels()).sum(),
            step_sizes: self.layers.len(),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() == 0 || x.shape()[1..] != self.arch.input_shape[..] {
            return Err(PqkError::shape(format!(
                "input {:?} does not match [N, {:?}]",
                x.shape(),
                self.arch.input_shape
            )));
        }
        Ok(())
    }

    /// Records one forward pass on `tape` without touching running statistics.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, path: Path, training: bool) -> Result<ForwardPass> {
        self.check_input(x)?;
        if path == Path::Teacher && (self.phase != Phase::Phase2 || !self.has_teacher()) {
            return Err(PqkError::Phase(format!(
                "the teacher path exists only in Phase 2 (model is in {:?})",
                self.phase
            )));
        }
        let learn_steps = self.phase == Phase::Phase1;
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        let mut steps = Vec::with_capacity(self.layers.len());
        let mut effective = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let w = tape.param(l.weight.clone());
            weights.push(w);
            biases.push(l.bias.as_ref().map(|b| tape.param(b.clone())));
            match path {
                Path::Teacher => {
                    steps.push(None);
                    effective.push(w);
                }
                Path::Student => {
                    let gated = if self.quantize {
                        self.quant_reads.0.fetch_add(1, Ordering::Relaxed);
                        let s = Tensor::scalar(l.quant.step);
                        let s = if learn_steps && l.quant.trainable {
                            let v = tape.param(s);
                            steps.push(Some(v));
                            v
                        } else {
                            steps.push(None);
                            tape.constant(s)
                        };
                        tape.fake_quantize(w, s, l.quant.bits)?
                    } else {
                        steps.push(None);
                        w
                    };
                    let m = tape.constant(l.mask.to_tensor());
                    effective.push(tape.mul(gated, m)?);
                }
            }
        }

        let mut gammas = Vec::with_capacity(self.norms.len());
        let mut betas = Vec::with_capacity(self.norms.len());
        let mut bn_stats = Vec::new();
        let eps = self.arch.bn_eps as f32;
        let mut bn = |tape: &mut Tape, idx: usize, h: Var| -> Result<Var> {
            let p = self.norms[idx].params(path).expect("path checked above");
            let g = tape.param(p.gamma.clone());
            let b = tape.param(p.beta.clone());
            gammas.push(g);
            betas.push(b);
            let mode = if training {
                BnMode::Train { eps }
            } else {
                BnMode::Eval {
                    mean: p.running_mean.data(),
                    var: p.running_var.data(),
                    eps,
                }
            };
            let (out, stats) = tape.batch_norm(h, g, b, mode)?;
            bn_stats.extend(stats);
            Ok(out)
        };

        let input = tape.constant(x.clone());
        let logits = match self.arch.kind {
            ArchKind::Res8 => {
                let conv = |tape: &mut Tape, i: usize, h: Var| -> Result<Var> {
                    match self.layers[i].kind {
                        LayerKind::Conv2d { stride, padding } => tape.conv2d(h, effective[i], stride, padding),
                        LayerKind::Linear => unreachable!("res8 conv slot holds a linear layer"),
                    }
                };
                let mut h = conv(tape, 0, input)?;
                h = bn(tape, 0, h)?;
                h = tape.relu(h);
                h = tape.avg_pool2d(h, 2, 2, 0)?;
                for b in 0..self.arch.blocks {
                    let (ia, ib) = (1 + 2 * b, 2 + 2 * b);
                    let mut y = conv(tape, ia, h)?;
                    y = bn(tape, ia, y)?;
                    y = tape.relu(y);
                    y = conv(tape, ib, y)?;
                    y = bn(tape, ib, y)?;
                    let sum = tape.add(y, h)?;
                    h = tape.relu(sum);
                }
                let pooled = tape.global_avg_pool(h)?;
                let fc = self.layers.len() - 1;
                let z = tape.matmul_bt(pooled, effective[fc])?;
                tape.add_bias(z, biases[fc].expect("fc has a bias"))?
            }
            ArchKind::Mlp => {
                let mut h = tape.flatten(input)?;
                let last = self.layers.len() - 1;
                for i in 0..self.layers.len() {
                    h = tape.matmul_bt(h, effective[i])?;
                    h = tape.add_bias(h, biases[i].expect("mlp layers have biases"))?;
                    if i < last {
                        h = tape.relu(h);
                    }
                }
                h
            }
        };
        Ok(ForwardPass {
            path,
            logits,
            weights,
            biases,
            steps,
            gammas,
            betas,
            bn_stats,
        })
    }

    fn absorb_stats(&mut self, path: Path, stats: &[BatchStats]) {
        let momentum = self.arch.bn_momentum as f32;
        for (n, s) in self.norms.iter_mut().zip(stats) {
            if let Some(p) = n.params_mut(path) {
                p.absorb(s, momentum);
            }
        }
    }

    /// Student forward; in training mode folds batch statistics into the
    /// student running estimates.
    pub fn forward_student(&mut self, tape: &mut Tape, x: &Tensor, training: bool) -> Result<ForwardPass> {
        let pass = self.forward(tape, x, Path::Student, training)?;
        self.absorb_stats(Path::Student, &pass.bn_stats);
        Ok(pass)
    }

    /// Teacher forward (Phase 2 only); updates only the teacher statistics.
    pub fn forward_teacher(&mut self, tape: &mut Tape, x: &Tensor, training: bool) -> Result<ForwardPass> {
        let pass = self.forward(tape, x, Path::Teacher, training)?;
        self.absorb_stats(Path::Teacher, &pass.bn_stats);
        Ok(pass)
    }

    /// Evaluation-mode logits of `path`.
    pub fn logits(&self, x: &Tensor, path: Path) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, x, path, false)?;
        Ok(tape.value(pass.logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(n: usize, shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut full = vec![n];
        full.extend_from_slice(shape);
        let numel = full.iter().product();
        Tensor::new(full, (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn mlp_parameter_count() {
        let m = build_model(&ArchConfig::mlp(2, 16, 2), &QuantConfig::default(), 0).unwrap();
        let c = m.param_counts();
        assert_eq!(c.prunable + c.biases, 2 * 16 + 16 + 16 * 16 + 16 + 16 * 2 + 2);
        assert_eq!(c.prunable + c.biases, 354);
        assert_eq!(c.batchnorm, 0);
        assert_eq!(c.step_sizes, 3);
    }

    #[test]
    fn res8_shapes_and_partition() {
        let arch = ArchConfig::res8(6, [1, 32, 32], 5);
        let m = build_model(&arch, &QuantConfig::default(), 1).unwrap();
        let z = m.logits(&input(3, &[1, 32, 32], 0), Path::Student).unwrap();
        assert_eq!(z.shape(), &[3, 5]);
        let c = m.param_counts();
        assert_eq!(c.prunable, 6 * 9 + 6 * 6 * 9 * 6 + 5 * 6);
        assert_eq!(c.biases, 5);
        assert_eq!(c.batchnorm, 7 * 2 * 6);
        assert_eq!(c.step_sizes, 8);
        assert_eq!(c.total(), c.prunable + 5 + 84 + 8);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(build_model(&ArchConfig::mlp(2, 0, 2), &QuantConfig::default(), 0).is_err());
        assert!(build_model(&ArchConfig::mlp(2, 4, 1), &QuantConfig::default(), 0).is_err());
        let mut a = ArchConfig::res8(4, [1, 8, 8], 3);
        a.input_shape = vec![8, 8];
        assert!(build_model(&a, &QuantConfig::default(), 0).is_err());
        assert!(build_model(&ArchConfig::mlp(2, 4, 2), &QuantConfig::bits(9), 0).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let arch = ArchConfig::res8(4, [1, 8, 8], 3);
        let a = build_model(&arch, &QuantConfig::default(), 9).unwrap();
        let b = build_model(&arch, &QuantConfig::default(), 9).unwrap();
        for (x, y) in a.layers().iter().zip(b.layers()) {
            assert!(x.weight().bit_eq(y.weight()));
        }
        let c = build_model(&arch, &QuantConfig::default(), 10).unwrap();
        assert!(!a.layers()[0].weight().bit_eq(c.layers()[0].weight()));
    }

    #[test]
    fn zero_mask_on_head_gives_bias() {
        let arch = ArchConfig::res8(4, [1, 8, 8], 3);
        let mut m = build_model(&arch, &QuantConfig::bits(4), 2).unwrap();
        let fc = m.layers().len() - 1;
        *m.layers_mut()[fc].bias_mut().unwrap() = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let shape = m.layers()[fc].weight().shape().to_vec();
        m.layers_mut()[fc].set_mask(Mask::zeros(&shape)).unwrap();
        let z = m.logits(&input(4, &[1, 8, 8], 3), Path::Student).unwrap();
        for row in z.data().chunks(3) {
            assert_eq!(row, &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn pruned_weights_do_not_affect_student() {
        let arch = ArchConfig::res8(4, [1, 8, 8], 3);
        let mut m = build_model(&arch, &QuantConfig::bits(4), 2).unwrap();
        let masks: Vec<Mask> = m.layers().iter().map(|l| crate::prune::compute_mask(l.weight(), 0.6).unwrap()).collect();
        m.set_masks(masks).unwrap();
        let x = input(5, &[1, 8, 8], 4);
        let before = m.logits(&x, Path::Student).unwrap();
        let mut perturbed = m.clone();
        for l in perturbed.layers_mut() {
            let keep = l.mask().keep().to_vec();
            for (v, k) in l.weight_mut().data_mut().iter_mut().zip(keep) {
                if !k {
                    *v += 3.7;
                }
            }
        }
        let after = perturbed.logits(&x, Path::Student).unwrap();
        assert!(before.bit_eq(&after));
    }

    #[test]
    fn quant_bypass_matches_plain_masked_network() {
        let arch = ArchConfig::mlp(3, 8, 4);
        let mut m = build_model(&arch, &QuantConfig::disabled(), 5).unwrap();
        let masks: Vec<Mask> = m.layers().iter().map(|l| crate::prune::compute_mask(l.weight(), 0.5).unwrap()).collect();
        m.set_masks(masks).unwrap();
        let x = input(6, &[3], 1);
        let z = m.logits(&x, Path::Student).unwrap();
        // Reference: plain masked MLP evaluated directly.
        let mut tape = Tape::new();
        let mut h = tape.constant(x.clone());
        for (i, l) in m.layers().iter().enumerate() {
            let w = tape.constant(crate::prune::apply_mask(l.weight(), l.mask()).unwrap());
            let b = tape.constant(l.bias().unwrap().clone());
            h = tape.matmul_bt(h, w).unwrap();
            h = tape.add_bias(h, b).unwrap();
            if i + 1 < m.layers().len() {
                h = tape.relu(h);
            }
        }
        assert!(z.bit_eq(tape.value(h)));
        assert_eq!(m.quant_reads(), 0);
    }

    #[test]
    fn teacher_requires_phase2() {
        let arch = ArchConfig::res8(4, [1, 8, 8], 3);
        let mut m = build_model(&arch, &QuantConfig::bits(8), 2).unwrap();
        let x = input(2, &[1, 8, 8], 0);
        assert!(matches!(m.logits(&x, Path::Teacher), Err(PqkError::Phase(_))));
        let mut tape = Tape::new();
        assert!(matches!(m.forward_teacher(&mut tape, &x, true), Err(PqkError::Phase(_))));
        m.enter_phase2();
        assert!(m.logits(&x, Path::Teacher).is_ok());
    }

    #[test]
    fn teacher_never_reads_quant_spec() {
        let arch = ArchConfig::res8(4, [1, 8, 8], 3);
        let mut m = build_model(&arch, &QuantConfig::bits(4), 2).unwrap();
        m.enter_phase2();
        let x = input(2, &[1, 8, 8], 0);
        let mut tape = Tape::new();
        m.forward_teacher(&mut tape, &x, true).unwrap();
        m.logits(&x, Path::Teacher).unwrap();
        assert_eq!(m.quant_reads(), 0);
        m.logits(&x, Path::Student).unwrap();
        assert_eq!(m.quant_reads(), m.layers().len() as u64);
    }

    #[test]
    fn teacher_sees_every_weight() {
        let arch = ArchConfig::res8(4, [1, 8, 8], 3);
        let mut m = build_model(&arch, &QuantConfig::bits(4), 2).unwrap();
        let masks: Vec<Mask> = m.layers().iter().map(|l| crate::prune::compute_mask(l.weight(), 0.9).unwrap()).collect();
        m.set_masks(masks).unwrap();
        m.enter_phase2();
        let x = input(3, &[1, 8, 8], 7);
        let base = m.logits(&x, Path::Teacher).unwrap();
        for li in 0..m.layers().len() {
            let pruned = m.layers()[li].mask().keep().iter().position(|&k| !k).unwrap();
            let mut p = m.clone();
            p.layers_mut()[li].weight_mut().data_mut()[pruned] += 0.5;
            let z = p.logits(&x, Path::Teacher).unwrap();
            let diff: f32 = z.data().iter().zip(base.data()).map(|(a, b)| (a - b).abs()).sum();
            assert!(diff > 0.0, "layer {li} pruned weight has no teacher effect");
        }
    }

    #[test]
    fn teacher_equals_student_in_structural_limit() {
        // Weights on the grid, no pruning: both paths compute the same function
        // once their batch-norm sets agree.
        let arch = ArchConfig::res8(4, [1, 8, 8], 3);
        let mut m = build_model(&arch, &QuantConfig::bits(8), 2).unwrap();
        for l in m.layers_mut() {
            let q = l.student_weight(true).unwrap();
            *l.weight_mut() = q;
        }
        m.enter_phase2();
        let x = input(3, &[1, 8, 8], 7);
        let zs = m.logits(&x, Path::Student).unwrap();
        let zt = m.logits(&x, Path::Teacher).unwrap();
        assert!(zs.bit_eq(&zt));
    }

    #[test]
    fn bn_clone_is_isolated_and_idempotent() {
        let arch = ArchConfig::res8(4, [1, 8, 8], 3);
        let mut m = build_model(&arch, &QuantConfig::bits(8), 2).unwrap();
        let x = input(4, &[1, 8, 8], 1);
        let mut tape = Tape::new();
        m.forward_student(&mut tape, &x, true).unwrap();
        let student_eval = m.logits(&x, Path::Student).unwrap();
        m.enter_phase2();
        assert!(m.logits(&x, Path::Student).unwrap().bit_eq(&student_eval));
        for n in m.norms() {
            assert_eq!(n.params(Path::Student), n.params(Path::Teacher));
        }
        let snapshot: Vec<BnParams> = m.norms().iter().map(|n| n.params(Path::Student).unwrap().clone()).collect();
        let mut tape = Tape::new();
        m.forward_teacher(&mut tape, &input(4, &[1, 8, 8], 2), true).unwrap();
        for (n, s) in m.norms().iter().zip(&snapshot) {
            assert_eq!(n.params(Path::Student).unwrap(), s);
            assert_ne!(n.params(Path::Teacher).unwrap().running_mean, s.running_mean);
        }
        let teacher_before: Vec<BnParams> = m.norms().iter().map(|n| n.params(Path::Teacher).unwrap().clone()).collect();
        m.clone_bn_for_teacher();
        for (n, t) in m.norms().iter().zip(&teacher_before) {
            assert_eq!(n.params(Path::Teacher).unwrap(), t);
        }
    }
}
