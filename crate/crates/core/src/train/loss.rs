//! Retrofit objectives: the one-sided compression hinge and logit distillation.

use crate::numerics::{kl_rows, softmax_rows, NumericsError, Tape, Tensor, Var};

/// Floor for student log-probabilities inside the KL.
pub const LOG_PROB_FLOOR: f64 = -30.0;

/// `max(alpha* · L·H·T − Σ alpha, 0)` over decisions indexed `[layer][head][token]`.
pub fn aux_loss(decisions: &[Vec<Vec<f64>>], alpha_target: f64) -> f64 {
    let count: usize = decisions.iter().flatten().map(Vec::len).sum();
    let total: f64 = decisions.iter().flatten().flatten().sum();
    (alpha_target * count as f64 - total).max(0.0)
}

/// Hinge on the tape. `alphas` are `T×H` decision tensors, one per layer.
pub fn aux_loss_on_tape(tape: &mut Tape, alphas: &[Var], alpha_target: f64) -> Var {
    let count: usize = alphas.iter().map(|&a| tape.value(a).numel()).sum();
    let mut sums = alphas.iter().map(|&a| tape.sum(a)).collect::<Vec<_>>();
    let mut total = sums.pop().expect("at least one layer");
    for s in sums {
        total = tape.add(total, s).expect("scalars");
    }
    let neg = tape.scale(total, -1.0);
    let gap = tape.add_scalar(neg, alpha_target * count as f64);
    tape.relu(gap)
}

/// Mean over positions of `KL(softmax(teacher) || softmax(student))`.
pub fn distill_loss(student_logits: &Tensor, teacher_logits: &Tensor) -> Result<f64, NumericsError> {
    if student_logits.shape() != teacher_logits.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "distill_loss",
            left: student_logits.shape().to_vec(),
            right: teacher_logits.shape().to_vec(),
        });
    }
    let p = softmax_rows(teacher_logits)?;
    kl_rows(student_logits, &p, LOG_PROB_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, stream};

    #[test]
    fn hinge_values() {
        assert_eq!(aux_loss(&[vec![vec![0.0; 4]]], 0.5), 2.0);
        assert_eq!(aux_loss(&[vec![vec![1.0, 1.0, 1.0, 0.0]]], 0.5), 0.0);
    }

    #[test]
    fn hinge_gradient_is_minus_one_or_zero() {
        for (vals, expect) in [(vec![0.1, 0.2, 0.0, 0.3], -1.0), (vec![1.0, 1.0, 0.9, 0.0], 0.0)] {
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::new(vec![4, 1], vals).unwrap());
            let l = aux_loss_on_tape(&mut tape, &[a], 0.5);
            let g = tape.backward(l).unwrap().wrt(a);
            assert!(g.data().iter().all(|&x| x == expect), "{g:?}");
        }
    }

    #[test]
    fn identical_logits_give_zero() {
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.5, -1.0, 2.0, 0.0, 0.3]).unwrap();
        assert!(distill_loss(&x, &x).unwrap().abs() < 1e-15);
    }

    #[test]
    fn masked_student_is_clamped() {
        let t = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let s = Tensor::new(vec![1, 2], vec![0.0, f64::NEG_INFINITY]).unwrap();
        // 0.5·(ln 0.5 − 0) + 0.5·(ln 0.5 − (−30))
        let want = 0.5 * (0.5f64).ln() + 0.5 * ((0.5f64).ln() + 30.0);
        let got = distill_loss(&s, &t).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!(got.is_finite() && got > 10.0);
    }

    #[test]
    fn matches_two_loop_oracle() {
        let mut rng = stream(3, "kl");
        let s = Tensor::new(vec![4, 8], (0..32).map(|_| normal(&mut rng)).collect()).unwrap();
        let t = Tensor::new(vec![4, 8], (0..32).map(|_| normal(&mut rng)).collect()).unwrap();
        let mut want = 0.0;
        for i in 0..4 {
            let zs: f64 = (0..8).map(|v| s.get(i, v).exp()).sum();
            let zt: f64 = (0..8).map(|v| t.get(i, v).exp()).sum();
            for v in 0..8 {
                let p = t.get(i, v).exp() / zt;
                let q = s.get(i, v).exp() / zs;
                want += p * (p / q).ln();
            }
        }
        want /= 4.0;
        assert!((distill_loss(&s, &t).unwrap() - want).abs() < 1e-12);
        assert!(want > 0.0);
    }
}
