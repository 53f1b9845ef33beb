//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] is built fresh for every training step. Leaves are either
//! parameters (gradients requested) or constants. Every op appends a node whose
//! parents already exist, so the node order is a topological order and
//! [`Tape::backward`] is a single reverse sweep.

use crate::error::{PqkError, Result};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::quant;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f32),
    AddBias {
        x: Var,
        bias: Var,
    },
    Matmul {
        a: Var,
        b: Var,
        b_trans: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    AvgPool2d {
        x: Var,
        geom: PoolGeom,
        planes: usize,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    NllMean {
        logp: Var,
        targets: Vec<usize>,
    },
    SoftmaxCe {
        z: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
    },
    SoftKl {
        z: Var,
        p: Vec<f64>,
        q: Vec<f64>,
        scale: f64,
    },
    FakeQuant {
        w: Var,
        step: Var,
        codes: Vec<i8>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Statistics of one batch-norm call in training mode, per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f32>,
    /// Elements per channel that went into the statistics.
    pub count: usize,
}

#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    Train { eps: f32 },
    Eval { mean: &'a [f32], var: &'a [f32], eps: f32 },
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf whose gradient is requested by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A constant copy of `v`'s current value, cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return ta.zip_map(tb, f);
        }
        if tb.is_scalar() {
            let s = tb.item();
            return Ok(ta.map(|x| f(x, s)));
        }
        if ta.is_scalar() {
            let s = ta.item();
            return Ok(tb.map(|x| f(s, x)));
        }
        Err(PqkError::shape(format!(
            "{name}: incompatible shapes {:?} and {:?}",
            ta.shape(),
            tb.shape()
        )))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push_op(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f32) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push_op(out, Op::ScalarMul(a, s), &[a])
    }

    /// Adds a per-channel `bias[C]` to `x[N, C, ...]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() < 2 || tb.rank() != 1 || tb.shape()[0] != tx.shape()[1] {
            return Err(PqkError::shape(format!(
                "add_bias: bias {:?} does not match channels of {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let c = tx.shape()[1];
        let inner: usize = tx.shape()[2..].iter().product();
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[(i / inner) % c];
        }
        Ok(self.push_op(out, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`, the layout of a fully connected layer.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_trans: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(PqkError::shape(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (kb, n) = if b_trans {
            (tb.shape()[1], tb.shape()[0])
        } else {
            (tb.shape()[0], tb.shape()[1])
        };
        if k != kb {
            return Err(PqkError::shape(format!(
                "matmul inner dimensions differ: {:?} and {:?}{}",
                ta.shape(),
                tb.shape(),
                if b_trans { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), b_trans, &mut out, false);
        let out = Tensor::from_parts(vec![m, n], out);
        Ok(self.push_op(out, Op::Matmul { a, b, b_trans }, &[a, b]))
    }

    /// Cross-correlation of `x[N,Cin,H,W]` with `w[Cout,Cin,kh,kw]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 4 || tw.rank() != 4 {
            return Err(PqkError::shape(format!(
                "conv2d needs rank-4 input and weight, got {:?} and {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        let (n, cin, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (cout, wcin, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        if cin != wcin {
            return Err(PqkError::shape(format!(
                "conv2d channel mismatch: input {:?}, weight {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        if stride == 0 {
            return Err(PqkError::shape("conv2d stride must be positive"));
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(PqkError::shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                wd + 2 * padding
            )));
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
        };
        let out = kernels::conv2d_forward(&geom, n, tx.data(), tw.data());
        let out = Tensor::from_parts(vec![n, cout, geom.out_h(), geom.out_w()], out);
        Ok(self.push_op(out, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push_op(out, Op::Relu(x), &[x])
    }

    /// Average pooling of `x[N,C,H,W]`; windows are clipped to the input and
    /// averaged over the cells they cover.
    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 4 {
            return Err(PqkError::shape(format!("avg_pool2d needs rank 4, got {:?}", tx.shape())));
        }
        let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        if kernel == 0 || stride == 0 || kernel > h + 2 * padding || kernel > w + 2 * padding || padding >= kernel {
            return Err(PqkError::shape(format!(
                "avg_pool2d: kernel {kernel}, stride {stride}, padding {padding} invalid for {h}x{w}"
            )));
        }
        let geom = PoolGeom {
            h,
            w,
            kernel,
            stride,
            pad: padding,
        };
        let out = kernels::avg_pool_forward(&geom, n * c, tx.data());
        let out = Tensor::from_parts(vec![n, c, geom.out_h(), geom.out_w()], out);
        Ok(self.push_op(out, Op::AvgPool2d { x, geom, planes: n * c }, &[x]))
    }

    /// `[N,C,H,W] -> [N,C]` mean over the spatial axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 4 {
            return Err(PqkError::shape(format!(
                "global_avg_pool needs rank 4, got {:?}",
                tx.shape()
            )));
        }
        let (n, c) = (tx.shape()[0], tx.shape()[1]);
        let hw = tx.shape()[2] * tx.shape()[3];
        let data = tx
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f32>() / hw as f32)
            .collect();
        let out = Tensor::from_parts(vec![n, c], data);
        Ok(self.push_op(out, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push_op(out, Op::Reshape(x), &[x]))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.is_empty() {
            return Err(PqkError::shape("flatten of a scalar"));
        }
        let rest = shape[1..].iter().product();
        self.reshape(x, &[shape[0], rest])
    }

    /// Per-channel normalization of `x[N,C]` or `x[N,C,H,W]` with affine
    /// `gamma[C]`, `beta[C]`. In training mode the batch statistics are
    /// returned so the caller can fold them into its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let tx = self.value(x);
        if tx.rank() != 2 && tx.rank() != 4 {
            return Err(PqkError::shape(format!("batch_norm needs rank 2 or 4, got {:?}", tx.shape())));
        }
        let (n, c) = (tx.shape()[0], tx.shape()[1]);
        let inner: usize = tx.shape()[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(PqkError::shape(format!(
                    "batch_norm {name} has shape {:?}, expected [{c}]",
                    self.value(v).shape()
                )));
            }
        }
        let count = n * inner;
        let (mean, var, eps, batch_stats) = match mode {
            BnMode::Train { eps } => {
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for s in 0..n {
                        let base = (s * c + ch) * inner;
                        acc += tx.data()[base..base + inner].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mu = acc / count as f64;
                    let mut sq = 0.0f64;
                    for s in 0..n {
                        let base = (s * c + ch) * inner;
                        sq += tx.data()[base..base + inner]
                            .iter()
                            .map(|&v| (v as f64 - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = mu as f32;
                    var[ch] = (sq / count as f64) as f32;
                }
                (mean, var, eps, true)
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(PqkError::shape("batch_norm running statistics do not match channels"));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; tx.numel()];
        let mut out = vec![0.0; tx.numel()];
        for (i, (&v, (xh, o))) in tx.data().iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / inner) % c;
            *xh = (v - mean[ch]) * inv_std[ch];
            *o = g[ch] * *xh + b[ch];
        }
        let shape = tx.shape().to_vec();
        let stats = batch_stats.then(|| BatchStats { mean, var, count });
        let var_out = self.push_op(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        );
        Ok((var_out, stats))
    }

    /// Row-wise log-softmax of `z[N, m]`, stabilized by subtracting the row max.
    pub fn log_softmax(&mut self, z: Var) -> Result<Var> {
        let tz = self.value(z);
        if tz.rank() != 2 || tz.shape()[1] < 2 {
            return Err(PqkError::shape(format!(
                "log_softmax needs [N, m] with m >= 2, got {:?}",
                tz.shape()
            )));
        }
        let out = log_softmax_rows(tz);
        Ok(self.push_op(out, Op::LogSoftmax(z), &[z]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.push_op(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = (t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64) as f32;
        self.push_op(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// `-mean_i log softmax(z)[i, targets[i]]`, accumulated in f64.
    pub fn softmax_cross_entropy(&mut self, z: Var, targets: &[usize]) -> Result<Var> {
        let tz = self.value(z);
        if tz.rank() != 2 || tz.shape()[1] < 2 || tz.shape()[0] != targets.len() {
            return Err(PqkError::shape(format!(
                "cross-entropy: logits {:?} vs {} targets",
                tz.shape(),
                targets.len()
            )));
        }
        let (n, m) = (tz.shape()[0], tz.shape()[1]);
        if let Some(&bad) = targets.iter().find(|&&y| y >= m) {
            return Err(PqkError::Data(format!("label {bad} out of range for {m} classes")));
        }
        let mut probs: Vec<f64> = tz.data().iter().map(|&v| v as f64).collect();
        let mut loss = 0.0f64;
        for (row, &y) in probs.chunks_mut(m).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[y];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let op = Op::SoftmaxCe {
            z,
            probs,
            targets: targets.to_vec(),
        };
        Ok(self.push_op(Tensor::scalar((loss / n as f64) as f32), op, &[z]))
    }

    /// Batch-mean `KL(softmax(target/T) ‖ softmax(z/T))`. `target` is a constant;
    /// the value is accumulated in f64 so small divergences keep their precision.
    pub fn soft_kl(&mut self, target: &Tensor, z: Var, temperature: f64) -> Result<Var> {
        let tz = self.value(z);
        if tz.rank() != 2 || tz.shape()[1] < 2 || target.shape() != tz.shape() {
            return Err(PqkError::shape(format!(
                "soft_kl: target {:?} vs logits {:?}",
                target.shape(),
                tz.shape()
            )));
        }
        let (n, m) = (tz.shape()[0], tz.shape()[1]);
        let log_probs = |t: &Tensor| -> Vec<f64> {
            let mut out: Vec<f64> = t.data().iter().map(|&v| v as f64 / temperature).collect();
            for row in out.chunks_mut(m) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
                row.iter_mut().for_each(|v| *v -= lse);
            }
            out
        };
        let (lp, lq) = (log_probs(target), log_probs(tz));
        let kl: f64 = lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum::<f64>() / n as f64;
        let op = Op::SoftKl {
            z,
            p: lp.iter().map(|v| v.exp()).collect(),
            q: lq.iter().map(|v| v.exp()).collect(),
            scale: 1.0 / (n as f64 * temperature),
        };
        Ok(self.push_op(Tensor::scalar(kl as f32), op, &[z]))
    }

    /// `-mean_i logp[i, targets[i]]`.
    pub fn nll_mean(&mut self, logp: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logp);
        if t.rank() != 2 || t.shape()[0] != targets.len() {
            return Err(PqkError::shape(format!(
                "nll: log-probabilities {:?} vs {} targets",
                t.shape(),
                targets.len()
            )));
        }
        let m = t.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&y| y >= m) {
            return Err(PqkError::Data(format!("label {bad} out of range for {m} classes")));
        }
        let acc: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &y)| t.data()[i * m + y] as f64)
            .sum();
        let out = Tensor::scalar((-acc / targets.len() as f64) as f32);
        Ok(self.push_op(
            out,
            Op::NllMean {
                logp,
                targets: targets.to_vec(),
            },
            &[logp],
        ))
    }

    /// Quantize-dequantize `w` onto the `bits`-bit grid of step `step` (a
    /// one-element var). Backward is the straight-through estimator for `w`
    /// and `Σ g·code` for the step.
    pub fn fake_quantize(&mut self, w: Var, step: Var, bits: u32) -> Result<Var> {
        let s = self.value(step);
        if !s.is_scalar() {
            return Err(PqkError::shape(format!("step size must be a scalar, got {:?}", s.shape())));
        }
        let spec = quant::QuantSpec::new(bits, s.item())?;
        let codes = quant::quantize(self.value(w), &spec)?;
        let out = quant::dequantize(&codes, &spec)?;
        Ok(self.push_op(
            out,
            Op::FakeQuant {
                w,
                step,
                codes: codes.into_codes(),
            },
            &[w, step],
        ))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(PqkError::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.filter(|_| n.requires_grad).map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads, visited })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, g: Vec<f32>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradient contribution of a broadcast binary op to one operand.
    fn reduce_to(&self, v: Var, g: Vec<f32>) -> Vec<f32> {
        if self.value(v).numel() == g.len() {
            g
        } else {
            vec![g.iter().map(|&x| x as f64).sum::<f64>() as f32]
        }
    }

    fn broadcast_value(&self, v: Var, len: usize) -> std::borrow::Cow<'_, [f32]> {
        let t = self.value(v);
        if t.numel() == len {
            std::borrow::Cow::Borrowed(t.data())
        } else {
            std::borrow::Cow::Owned(vec![t.item(); len])
        }
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        let r = self.reduce_to(v, g.to_vec());
                        self.accumulate(grads, v, r);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    let r = self.reduce_to(*a, g.to_vec());
                    self.accumulate(grads, *a, r);
                }
                if self.requires_grad(*b) {
                    let r = self.reduce_to(*b, g.iter().map(|x| -x).collect());
                    self.accumulate(grads, *b, r);
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.requires_grad(v) {
                        let o = self.broadcast_value(other, g.len());
                        let r = self.reduce_to(v, g.iter().zip(o.iter()).map(|(x, y)| x * y).collect());
                        self.accumulate(grads, v, r);
                    }
                }
            }
            Op::ScalarMul(a, s) => {
                let r = g.iter().map(|x| x * s).collect();
                self.accumulate(grads, *a, r);
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, g.to_vec());
                if self.requires_grad(*bias) {
                    let shape = self.value(*x).shape();
                    let c = shape[1];
                    let inner: usize = shape[2..].iter().product();
                    let mut db = vec![0.0f32; c];
                    for (i, &v) in g.iter().enumerate() {
                        db[(i / inner) % c] += v;
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Matmul { a, b, b_trans } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = node.value.shape()[1];
                if self.requires_grad(*a) {
                    // dA = dC · op(B)ᵀ
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, tb.data(), !b_trans, &mut da, false);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    if *b_trans {
                        // B is [n,k]: dB = dCᵀ · A
                        kernels::gemm(n, m, k, g, true, ta.data(), false, &mut db, false);
                    } else {
                        kernels::gemm(k, m, n, ta.data(), true, g, false, &mut db, false);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, geom } => {
                let tx = self.value(*x);
                let (dx, dw) = kernels::conv2d_backward(
                    geom,
                    tx.shape()[0],
                    tx.data(),
                    self.value(*w).data(),
                    g,
                );
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
            }
            Op::Relu(x) => {
                let r = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, r);
            }
            Op::AvgPool2d { x, geom, planes } => {
                let r = kernels::avg_pool_backward(geom, *planes, g);
                self.accumulate(grads, *x, r);
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape();
                let hw = shape[2] * shape[3];
                let mut r = vec![0.0; self.value(*x).numel()];
                for (plane, &gv) in r.chunks_mut(hw).zip(g) {
                    plane.fill(gv / hw as f32);
                }
                self.accumulate(grads, *x, r);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = self.value(*x).shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let count = (n * inner) as f32;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for (i, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                    let ch = (i / inner) % c;
                    dgamma[ch] += gv * xh;
                    dbeta[ch] += gv;
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (i, d) in dx.iter_mut().enumerate() {
                        let ch = (i / inner) % c;
                        let dxhat = g[i] * gam[ch];
                        *d = if *batch_stats {
                            // Full gradient including the dependence of mean and variance on x.
                            inv_std[ch] / count
                                * (count * dxhat - gam[ch] * dbeta[ch] - xhat[i] * gam[ch] * dgamma[ch])
                        } else {
                            dxhat * inv_std[ch]
                        };
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::LogSoftmax(z) => {
                let m = node.value.shape()[1];
                let mut r = vec![0.0; g.len()];
                for ((out, lp), gr) in r.chunks_mut(m).zip(node.value.data().chunks(m)).zip(g.chunks(m)) {
                    let gsum: f32 = gr.iter().sum();
                    for j in 0..m {
                        out[j] = gr[j] - lp[j].exp() * gsum;
                    }
                }
                self.accumulate(grads, *z, r);
            }
            Op::Sum(x) => {
                let r = vec![g[0]; self.value(*x).numel()];
                self.accumulate(grads, *x, r);
            }
            Op::Mean(x) => {
                let len = self.value(*x).numel();
                let r = vec![g[0] / len as f32; len];
                self.accumulate(grads, *x, r);
            }
            Op::SoftmaxCe { z, probs, targets } => {
                let m = probs.len() / targets.len();
                let c = g[0] as f64 / targets.len() as f64;
                let mut r: Vec<f32> = probs.iter().map(|&p| (c * p) as f32).collect();
                for (i, &y) in targets.iter().enumerate() {
                    r[i * m + y] = (c * (probs[i * m + y] - 1.0)) as f32;
                }
                self.accumulate(grads, *z, r);
            }
            Op::SoftKl { z, p, q, scale } => {
                let c = g[0] as f64 * scale;
                let r = q.iter().zip(p).map(|(&qi, &pi)| (c * (qi - pi)) as f32).collect();
                self.accumulate(grads, *z, r);
            }
            Op::NllMean { logp, targets } => {
                let m = self.value(*logp).shape()[1];
                let mut r = vec![0.0; targets.len() * m];
                let share = -g[0] / targets.len() as f32;
                for (i, &y) in targets.iter().enumerate() {
                    r[i * m + y] = share;
                }
                self.accumulate(grads, *logp, r);
            }
            Op::FakeQuant { w, step, codes } => {
                // Straight-through: dL/dw = dL/dw̄ for every element, clipped or not.
                self.accumulate(grads, *w, g.to_vec());
                if self.requires_grad(*step) {
                    let ds: f64 = g.iter().zip(codes).map(|(&gv, &q)| gv as f64 * q as f64).sum();
                    self.accumulate(grads, *step, vec![ds as f32]);
                }
            }
        }
    }
}

/// Row-wise log-softmax of a rank-2 tensor (no tape).
pub fn log_softmax_rows(z: &Tensor) -> Tensor {
    let m = z.shape()[1];
    let mut out = z.data().to_vec();
    for row in out.chunks_mut(m) {
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let lse = row.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln() as f32;
        for v in row.iter_mut() {
            *v = *v - max - lse;
        }
    }
    Tensor::from_parts(z.shape().to_vec(), out)
}

/// Gradients from one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `v`'s shape when the loss does not reach it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros_like(tape.value(v)))
    }

    /// Number of nodes processed by the sweep.
    pub fn visited(&self) -> usize {
        self.visited
    }
}
