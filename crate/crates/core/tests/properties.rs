mod common;

use pqk::autograd::{log_softmax_rows, Tape};
use pqk::distill::{self, soften, LossWeights};
use pqk::model::{build_model, ArchConfig, Path, QuantConfig};
use pqk::prune::{compute_mask, Mask};
use pqk::quant::{self, QuantSpec};
use pqk::Tensor;
use proptest::prelude::*;

use common::*;

fn logits(rows: usize, cols: usize, scale: f32) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f32..1.0, rows * cols)
        .prop_map(move |v| Tensor::new(vec![rows, cols], v.into_iter().map(|x| x * scale).collect()).unwrap())
}

fn eval_grad(z: &Tensor, other: &Tensor, labels: &[usize], w: LossWeights) -> (f32, Tensor) {
    let mut tape = Tape::new();
    let a = tape.param(z.clone());
    let b = tape.constant(other.clone());
    let l = distill::kd_loss_student(&mut tape, a, b, labels, w).unwrap();
    let g = tape.backward(l).unwrap();
    (tape.value(l).item(), g.wrt(&tape, a))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_and_backward_are_deterministic(seed in 0u64..1000) {
        let x = uniform(&mut rng(seed), &[3, 1, 8, 8], -1.0, 1.0);
        let model = build_model(&ArchConfig { blocks: 1, ..ArchConfig::res8(4, [1, 8, 8], 3) }, &QuantConfig::bits(4), seed).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &x, Path::Student, true).unwrap();
            let loss = distill::cross_entropy(&mut tape, pass.logits, &[0, 1, 2]).unwrap();
            let g = tape.backward(loss).unwrap();
            (tape.value(loss).item().to_bits(), g.wrt(&tape, pass.weights[0]))
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        prop_assert_eq!(l1, l2);
        prop_assert!(g1.bit_eq(&g2));
    }

    #[test]
    fn log_softmax_is_finite_for_large_logits(z in logits(3, 5, 1e4)) {
        let lp = log_softmax_rows(&z);
        prop_assert!(lp.data().iter().all(|v| v.is_finite() && *v <= 0.0));
        for row in lp.data().chunks(5) {
            let s: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn gradients_have_the_input_shape(z in logits(4, 3, 3.0), w in logits(3, 6, 1.0)) {
        let mut tape = Tape::new();
        let a = tape.param(z.clone());
        let b = tape.param(w.clone());
        let m = tape.matmul(a, b).unwrap();
        let r = tape.relu(m);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        prop_assert_eq!(g.wrt(&tape, a).shape().to_vec(), z.shape().to_vec());
        prop_assert_eq!(g.wrt(&tape, b).shape().to_vec(), w.shape().to_vec());
    }

    #[test]
    fn softened_rows_are_distributions(z in logits(4, 6, 20.0), t in 0.5f64..8.0) {
        let p = soften(&z, t).unwrap();
        for row in p.data().chunks(6) {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_shift_invariant(a in logits(3, 4, 4.0), b in logits(3, 4, 4.0), t in 0.5f64..6.0, shift in -5.0f32..5.0) {
        let kl = |from: &Tensor, to: &Tensor| {
            let mut tape = Tape::new();
            let f = tape.constant(from.clone());
            let g = tape.param(to.clone());
            let v = distill::kl_divergence(&mut tape, f, g, t).unwrap();
            tape.value(v).item()
        };
        prop_assert!(kl(&a, &b) >= -1e-6);
        let shifted = a.map(|v| v + shift);
        prop_assert!(kl(&a, &shifted).abs() < 1e-5);
    }

    #[test]
    fn pure_cross_entropy_weights_reduce_to_cross_entropy(z in logits(4, 3, 5.0), other in logits(4, 3, 5.0), t in 1.0f64..4.0) {
        let labels = [0, 2, 1, 1];
        let (l, g) = eval_grad(&z, &other, &labels, LossWeights { alpha: 1.0, beta: 0.0, temperature: t });
        let mut tape = Tape::new();
        let a = tape.param(z.clone());
        let ce = distill::cross_entropy(&mut tape, a, &labels).unwrap();
        let gc = tape.backward(ce).unwrap();
        prop_assert_eq!(l.to_bits(), tape.value(ce).item().to_bits());
        prop_assert!(g.bit_eq(&gc.wrt(&tape, a)));
    }

    #[test]
    fn masked_latent_weights_do_not_affect_the_student(seed in 0u64..500, noise in -3.0f32..3.0) {
        let arch = ArchConfig::mlp(3, 6, 2);
        let mut model = build_model(&arch, &QuantConfig::bits(4), seed).unwrap();
        let masks: Vec<Mask> = model.layers().iter().map(|l| compute_mask(l.weight(), 0.5).unwrap()).collect();
        model.set_masks(masks).unwrap();
        let x = uniform(&mut rng(seed), &[5, 3], -1.0, 1.0);
        let before = model.logits(&x, Path::Student).unwrap();
        for l in model.layers_mut() {
            let keep = l.mask().keep().to_vec();
            for (w, k) in l.weight_mut().data_mut().iter_mut().zip(keep) {
                if !k {
                    *w += noise;
                }
            }
        }
        prop_assert!(model.logits(&x, Path::Student).unwrap().bit_eq(&before));
    }

    #[test]
    fn quantizer_codes_are_bounded_and_dequantize_exactly(
        w in prop::collection::vec(-50.0f32..50.0, 1..64),
        bits in 2u32..=8,
        step in 0.01f32..2.0,
    ) {
        let t = Tensor::new(vec![w.len()], w).unwrap();
        let spec = QuantSpec::new(bits, step).unwrap();
        let q = quant::quantize(&t, &spec).unwrap();
        let max = spec.max_code();
        prop_assert!(q.codes().iter().all(|&c| (c as i32).abs() <= max));
        let fq = quant::fake_quantize(&t, &spec).unwrap();
        let dq = quant::dequantize(&q, &spec).unwrap();
        prop_assert!(fq.bit_eq(&dq));
    }
}

/// Straight-line reference: divide, round half to even, clip, rescale.
fn reference(w: f32, s: f32, bits: u32) -> f32 {
    let q = ((1i32 << (bits - 1)) - 1) as f32;
    let r = (w / s).round_ties_even();
    r.clamp(-q, q) * s
}

#[test]
fn fake_quantize_matches_the_reference_on_a_fine_grid() {
    let grid: Vec<f32> = (-10_000..=10_000).map(|i| i as f32 * 1e-3).collect();
    let t = Tensor::new(vec![grid.len()], grid.clone()).unwrap();
    for bits in [2, 4, 8] {
        for s in [0.05f32, 0.3, 1.0] {
            let out = quant::fake_quantize(&t, &QuantSpec::new(bits, s).unwrap()).unwrap();
            for (&w, &v) in grid.iter().zip(out.data()) {
                assert_eq!(v, reference(w, s, bits), "w={w} s={s} k={bits}");
            }
        }
    }
}
