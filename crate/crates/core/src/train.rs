//! Phase 1 (pruning + QAT), Phase 2 (in-place teacher, mutual distillation),
//! the cross-entropy finetune baseline, and evaluation.

use crate::autograd::{Gradients, Tape};
use crate::config::{TrainConfig, UpdateOrder};
use crate::data::Dataset;
use crate::distill::{self, LossWeights};
use crate::error::{PqkError, Result};
use crate::metrics::Metrics;
use crate::model::{build_model, ForwardPass, Model, Path, Phase};
use crate::optim::{OptimizerState, SgdConfig, StepParams};
use crate::prune;
use crate::tensor::Tensor;

/// Batch-order streams; Phase 2 and the finetune baseline share one so that
/// both see identical batches.
const PHASE1_STREAM: u32 = 1;
const PHASE2_STREAM: u32 = 2;

const EVAL_BATCH: usize = 256;

/// Losses of one Phase-2 iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phase2Losses {
    pub student: f64,
    pub teacher: f64,
}

/// Optimizer hyperparameters for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub params: StepParams,
    /// Learning rate of the step-size group.
    pub step_lr: f32,
}

impl StepConfig {
    pub fn new(sgd: &SgdConfig, step_lr_scale: f64, epoch: usize, iteration: u64) -> Self {
        let lr = sgd.lr_at(epoch, iteration);
        StepConfig {
            params: StepParams {
                lr: lr as f32,
                momentum: sgd.momentum as f32,
                weight_decay: sgd.weight_decay as f32,
            },
            step_lr: (lr * step_lr_scale) as f32,
        }
    }
}

fn numeric_abort(model: &Model, what: &str, loss: f64) -> PqkError {
    let stats: Vec<String> = model
        .layers()
        .iter()
        .map(|l| {
            let finite = l.weight().data().iter().all(|v| v.is_finite());
            format!(
                "{}: max|w|={:.4e} finite={} S_w={:.4e} sparsity={:.4}",
                l.name(),
                l.weight().max_abs(),
                finite,
                l.quant().step,
                l.mask().sparsity()
            )
        })
        .collect();
    PqkError::Numeric(format!("{what} loss became {loss}; layer stats: {}", stats.join("; ")))
}

fn finite_loss(tape: &Tape, loss: crate::autograd::Var, model: &Model, what: &str) -> Result<f64> {
    let v = tape.value(loss).item() as f64;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(numeric_abort(model, what, v))
    }
}

/// Applies the gradients of one pass. A student pass updates kept weight
/// entries, biases, step sizes (when they are leaves of the pass) and the
/// student batch norm; a teacher pass updates pruned weight entries and the
/// teacher batch norm only.
pub fn apply_updates(
    model: &mut Model,
    opt: &mut OptimizerState,
    tape: &Tape,
    pass: &ForwardPass,
    grads: &Gradients,
    step: StepConfig,
) -> Result<()> {
    let path = pass.path;
    for (i, layer) in model.layers_mut().iter_mut().enumerate() {
        let name = layer.name().to_string();
        let select: Vec<bool> = match path {
            Path::Student => layer.mask().keep().to_vec(),
            Path::Teacher => layer.mask().keep().iter().map(|k| !k).collect(),
        };
        let g = grads.wrt(tape, pass.weights[i]);
        opt.update(&format!("{name}.weight"), layer.weight_mut(), &g, step.params, Some(&select))?;
        if path == Path::Student {
            if let (Some(bv), Some(b)) = (pass.biases[i], layer.bias_mut()) {
                let g = grads.wrt(tape, bv);
                opt.update(&format!("{name}.bias"), b, &g, step.params, None)?;
            }
            if let Some(sv) = pass.steps[i] {
                let g = grads.wrt(tape, sv).item();
                let momentum = step.params.momentum;
                opt.update_step_size(&format!("{name}.step"), &mut layer.quant_mut().step, g, step.step_lr, momentum);
            }
        }
    }
    let tag = match path {
        Path::Student => "student",
        Path::Teacher => "teacher",
    };
    for (j, norm) in model.norms_mut().iter_mut().enumerate() {
        let name = norm.name().to_string();
        let bn = norm
            .params_mut(path)
            .ok_or_else(|| PqkError::Phase(format!("norm {name} has no {tag} parameters")))?;
        let g = grads.wrt(tape, pass.gammas[j]);
        opt.update(&format!("{name}.{tag}.gamma"), &mut bn.gamma, &g, step.params, None)?;
        let g = grads.wrt(tape, pass.betas[j]);
        opt.update(&format!("{name}.{tag}.beta"), &mut bn.beta, &g, step.params, None)?;
    }
    Ok(())
}

/// One Phase-1 iteration: mask refresh at the configured cadence, student
/// forward, cross-entropy, and an update of the kept weights and step sizes.
/// `epoch` is one-based, `iteration` zero-based within the epoch.
pub fn phase1_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    x: &Tensor,
    labels: &[usize],
    epoch: usize,
    iteration: usize,
    step: StepConfig,
) -> Result<f64> {
    if model.phase() != Phase::Phase1 {
        return Err(PqkError::Phase(format!("phase-1 step on a model in {:?}", model.phase())));
    }
    prune::maybe_update_masks(model, &cfg.prune, epoch, iteration)?;
    cross_entropy_step(model, opt, x, labels, step)
}

fn cross_entropy_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    x: &Tensor,
    labels: &[usize],
    step: StepConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let pass = model.forward_student(&mut tape, x, true)?;
    let loss = distill::cross_entropy(&mut tape, pass.logits, labels)?;
    let value = finite_loss(&tape, loss, model, "student")?;
    let grads = tape.backward(loss)?;
    apply_updates(model, opt, &tape, &pass, &grads, step)?;
    opt.tick();
    Ok(value)
}

/// Student half of a Phase-2 iteration: `L_S` from the student forward and a
/// detached teacher forward, applied to the kept weights.
pub fn student_pass(
    model: &mut Model,
    opt: &mut OptimizerState,
    x: &Tensor,
    labels: &[usize],
    w: LossWeights,
    step: StepConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let teacher = if w.beta != 0.0 {
        Some(model.forward(&mut tape, x, Path::Teacher, true)?.logits)
    } else {
        None
    };
    let pass = model.forward_student(&mut tape, x, true)?;
    let target = teacher.unwrap_or(pass.logits);
    let loss = distill::kd_loss_student(&mut tape, pass.logits, target, labels, w)?;
    let value = finite_loss(&tape, loss, model, "student")?;
    let grads = tape.backward(loss)?;
    apply_updates(model, opt, &tape, &pass, &grads, step)?;
    Ok(value)
}

/// Teacher half of a Phase-2 iteration: `L_T` from the teacher forward and a
/// detached student forward, applied to the pruned weights.
pub fn teacher_pass(
    model: &mut Model,
    opt: &mut OptimizerState,
    x: &Tensor,
    labels: &[usize],
    w: LossWeights,
    step: StepConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let student = if w.beta != 0.0 {
        Some(model.forward(&mut tape, x, Path::Student, true)?.logits)
    } else {
        None
    };
    let pass = model.forward_teacher(&mut tape, x, true)?;
    let target = student.unwrap_or(pass.logits);
    let loss = distill::kd_loss_teacher(&mut tape, pass.logits, target, labels, w)?;
    let value = finite_loss(&tape, loss, model, "teacher")?;
    let grads = tape.backward(loss)?;
    apply_updates(model, opt, &tape, &pass, &grads, step)?;
    Ok(value)
}

/// One Phase-2 iteration with the given loss weights.
pub fn phase2_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    order: UpdateOrder,
    x: &Tensor,
    labels: &[usize],
    w: LossWeights,
    step: StepConfig,
) -> Result<Phase2Losses> {
    if model.phase() != Phase::Phase2 {
        return Err(PqkError::Phase(format!("phase-2 step on a model in {:?}", model.phase())));
    }
    let losses = match order {
        UpdateOrder::Sequential => {
            let student = student_pass(model, opt, x, labels, w, step)?;
            let teacher = teacher_pass(model, opt, x, labels, w, step)?;
            Phase2Losses { student, teacher }
        }
        UpdateOrder::Simultaneous => {
            let mut tape = Tape::new();
            let sp = model.forward_student(&mut tape, x, true)?;
            let tp = model.forward_teacher(&mut tape, x, true)?;
            let ls = distill::kd_loss_student(&mut tape, sp.logits, tp.logits, labels, w)?;
            let lt = distill::kd_loss_teacher(&mut tape, tp.logits, sp.logits, labels, w)?;
            let student = finite_loss(&tape, ls, model, "student")?;
            let teacher = finite_loss(&tape, lt, model, "teacher")?;
            let gs = tape.backward(ls)?;
            let gt = tape.backward(lt)?;
            apply_updates(model, opt, &tape, &sp, &gs, step)?;
            apply_updates(model, opt, &tape, &tp, &gt, step)?;
            Phase2Losses { student, teacher }
        }
    };
    opt.tick();
    Ok(losses)
}

/// Top-1 accuracy of `path` in evaluation mode.
pub fn evaluate(model: &Model, data: &Dataset, path: Path) -> Result<f64> {
    evaluate_batched(model, data, path, EVAL_BATCH)
}

pub fn evaluate_batched(model: &Model, data: &Dataset, path: Path, batch: usize) -> Result<f64> {
    data.check_classes(model.arch().classes)?;
    let mut correct = 0usize;
    let n = data.len();
    let mut start = 0;
    while start < n {
        let end = (start + batch.max(1)).min(n);
        let z = model.logits(&data.examples().slice_rows(start, end), path)?;
        correct += z
            .argmax_rows()
            .iter()
            .zip(&data.labels()[start..end])
            .filter(|(p, y)| p == y)
            .count();
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

fn check_data(cfg: &TrainConfig, train: &Dataset, dev: &Dataset) -> Result<()> {
    for d in [train, dev] {
        if d.feature_shape() != cfg.arch.input_shape.as_slice() {
            return Err(PqkError::Data(format!(
                "{} examples have shape {:?}, the architecture expects {:?}",
                d.split().label(),
                d.feature_shape(),
                cfg.arch.input_shape
            )));
        }
        d.check_classes(cfg.arch.classes)?;
    }
    Ok(())
}

fn layer_rows(model: &Model, metrics: &mut Metrics, epoch: usize, iter: u64) {
    let phase = model.phase();
    for l in model.layers() {
        metrics.push(epoch, phase, iter, "train", "student", &format!("sparsity:{}", l.name()), l.mask().sparsity());
    }
    for l in model.layers() {
        metrics.push(epoch, phase, iter, "train", "student", &format!("step_size:{}", l.name()), l.quant().step as f64);
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Phase 1 from a fresh model.
pub fn run_phase1(
    cfg: &TrainConfig,
    train: &Dataset,
    dev: &Dataset,
    metrics: &mut Metrics,
) -> Result<(Model, OptimizerState)> {
    cfg.validate()?;
    check_data(cfg, train, dev)?;
    let mut model = build_model(&cfg.arch, &cfg.quant, cfg.seed)?;
    let mut opt = OptimizerState::new();
    let mut global = 0u64;
    for epoch in 1..=cfg.phase1_epochs {
        let mut losses = Vec::new();
        let batches = train.epoch_batches(cfg.batch_size, cfg.seed, PHASE1_STREAM, epoch);
        for (it, idx) in batches.iter().enumerate() {
            let (x, y) = train.batch(idx);
            let step = StepConfig::new(&cfg.optimizer, cfg.quant.step_lr_scale, epoch, global);
            losses.push(phase1_step(&mut model, &mut opt, cfg, &x, &y, epoch, it, step)?);
            global += 1;
        }
        let p = Phase::Phase1;
        metrics.push(epoch, p, global, "train", "student", "loss", mean(&losses));
        metrics.push(epoch, p, global, "dev", "student", "accuracy", evaluate(&model, dev, Path::Student)?);
        layer_rows(&model, metrics, epoch, global);
        metrics.push(epoch, p, global, "train", "-", "lr", cfg.optimizer.lr_at(epoch, global.saturating_sub(1)));
        metrics.flush()?;
    }
    Ok((model, opt))
}

fn check_phase1_model(model: &Model, cfg: &TrainConfig) -> Result<()> {
    if model.phase() != Phase::Phase1 {
        return Err(PqkError::Phase(format!(
            "expected a Phase-1 model, found {:?}",
            model.phase()
        )));
    }
    if model.arch() != &cfg.arch {
        return Err(PqkError::config("the checkpoint architecture differs from the config"));
    }
    Ok(())
}

/// Phase 2 on a Phase-1 model: builds the teacher batch norm, freezes masks
/// and step sizes, and trains both paths with mutual distillation.
pub fn run_phase2(
    cfg: &TrainConfig,
    mut model: Model,
    train: &Dataset,
    dev: &Dataset,
    metrics: &mut Metrics,
) -> Result<(Model, OptimizerState)> {
    cfg.validate()?;
    check_data(cfg, train, dev)?;
    check_phase1_model(&model, cfg)?;
    model.enter_phase2();
    let p = Phase::Phase2;
    let mut opt = OptimizerState::new();
    metrics.push(0, p, 0, "dev", "student", "accuracy", evaluate(&model, dev, Path::Student)?);
    metrics.push(0, p, 0, "dev", "teacher", "accuracy", evaluate(&model, dev, Path::Teacher)?);
    let mut global = 0u64;
    let mut current: Option<LossWeights> = None;
    for epoch in 1..=cfg.phase2_epochs {
        let (mut ls, mut lt) = (Vec::new(), Vec::new());
        let batches = train.epoch_batches(cfg.batch_size, cfg.seed, PHASE2_STREAM, epoch);
        for idx in &batches {
            let w = cfg.kd.weights_at(epoch, global);
            if current != Some(w) {
                metrics.push(epoch, p, global, "train", "-", "alpha", w.alpha);
                metrics.push(epoch, p, global, "train", "-", "beta", w.beta);
                current = Some(w);
            }
            let (x, y) = train.batch(idx);
            let step = StepConfig::new(&cfg.optimizer, 0.0, epoch, global);
            let l = phase2_step(&mut model, &mut opt, cfg.update_order, &x, &y, w, step)?;
            ls.push(l.student);
            lt.push(l.teacher);
            global += 1;
        }
        metrics.push(epoch, p, global, "train", "student", "loss", mean(&ls));
        metrics.push(epoch, p, global, "train", "teacher", "loss", mean(&lt));
        metrics.push(epoch, p, global, "dev", "student", "accuracy", evaluate(&model, dev, Path::Student)?);
        metrics.push(epoch, p, global, "dev", "teacher", "accuracy", evaluate(&model, dev, Path::Teacher)?);
        layer_rows(&model, metrics, epoch, global);
        metrics.push(epoch, p, global, "train", "-", "lr", cfg.optimizer.lr_at(epoch, global.saturating_sub(1)));
        metrics.flush()?;
    }
    Ok((model, opt))
}

/// The baseline of the ablation: continue training the student path alone
/// with cross-entropy at learning rate `lr` for `budget` epochs, on the same
/// batches and learning-rate schedule as Phase 2. A zero budget returns the
/// model unchanged.
pub fn finetune_baseline(
    cfg: &TrainConfig,
    mut model: Model,
    lr: f64,
    budget: usize,
    train: &Dataset,
    dev: &Dataset,
    metrics: &mut Metrics,
) -> Result<(Model, OptimizerState)> {
    let mut sgd = cfg.optimizer.clone();
    sgd.lr = lr;
    sgd.validate()?;
    check_data(cfg, train, dev)?;
    check_phase1_model(&model, cfg)?;
    let mut opt = OptimizerState::new();
    if budget == 0 {
        return Ok((model, opt));
    }
    model.set_phase(Phase::Finetune);
    for l in model.layers_mut() {
        l.quant_mut().trainable = false;
    }
    let p = Phase::Finetune;
    metrics.push(0, p, 0, "dev", "student", "accuracy", evaluate(&model, dev, Path::Student)?);
    let mut global = 0u64;
    for epoch in 1..=budget {
        if epoch == 1 {
            metrics.push(epoch, p, 0, "train", "-", "alpha", 1.0);
            metrics.push(epoch, p, 0, "train", "-", "beta", 0.0);
        }
        let mut losses = Vec::new();
        for idx in &train.epoch_batches(cfg.batch_size, cfg.seed, PHASE2_STREAM, epoch) {
            let (x, y) = train.batch(idx);
            let step = StepConfig::new(&sgd, 0.0, epoch, global);
            losses.push(cross_entropy_step(&mut model, &mut opt, &x, &y, step)?);
            global += 1;
        }
        metrics.push(epoch, p, global, "train", "student", "loss", mean(&losses));
        metrics.push(epoch, p, global, "dev", "student", "accuracy", evaluate(&model, dev, Path::Student)?);
        layer_rows(&model, metrics, epoch, global);
        metrics.push(epoch, p, global, "train", "-", "lr", sgd.lr_at(epoch, global.saturating_sub(1)));
        metrics.flush()?;
    }
    Ok((model, opt))
}

/// Result of a full [`train`] run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub phase1: Model,
    pub phase2: Model,
    pub optimizer: OptimizerState,
    pub metrics: Metrics,
}

/// Phase 1 followed by Phase 2, with data loaded from the config.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train, dev) = cfg.data.load()?;
    let mut metrics = Metrics::new();
    let (phase1, _) = run_phase1(cfg, &train, &dev, &mut metrics)?;
    let (phase2, optimizer) = run_phase2(cfg, phase1.clone(), &train, &dev, &mut metrics)?;
    Ok(TrainOutcome {
        phase1,
        phase2,
        optimizer,
        metrics,
    })
}
