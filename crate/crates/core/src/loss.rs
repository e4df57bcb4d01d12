//! The composite training objective: alpha-weighted task loss plus
//! feature-matching distillation averaged over the wrapped layers.
//!
//! Feature pairs are tapped at each wrapped layer's output on the student
//! side and at the matching base layer's output on the frozen teacher
//! side. Each pair contributes a full-element-count MSE (batch included);
//! the layer average is unweighted.

use crate::graph::{Tape, Var};

/// Scalar components of one loss evaluation, kept for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub task: f64,
    pub feat_kd: f64,
    pub total: f64,
    pub alpha: f64,
}

/// Unweighted mean over layers of per-layer MSE between student and
/// teacher features. Teacher features must be constants on the tape so
/// gradient flows only into the student side.
pub fn feat_kd_loss(tape: &mut Tape, pairs: &[(Var, Var)]) -> Var {
    assert!(!pairs.is_empty(), "feature distillation needs at least one pair");
    let mut acc: Option<Var> = None;
    for &(student, teacher) in pairs {
        debug_assert!(
            !tape.requires_grad(teacher),
            "teacher features must not carry gradient"
        );
        let layer_mse = tape.mse(student, teacher);
        acc = Some(match acc {
            None => layer_mse,
            Some(sum) => tape.add(sum, layer_mse),
        });
    }
    let sum = acc.unwrap();
    tape.scale(sum, 1.0 / pairs.len() as f64)
}

/// `total = alpha * task + (1 - alpha) * feat_kd`; both components are
/// retained in the breakdown. At `alpha = 1` the total equals the task
/// loss exactly, and at `alpha = 0` it equals the distillation loss.
pub fn total_loss(tape: &mut Tape, task: Var, feat_kd: Var, alpha: f64) -> (Var, LossBreakdown) {
    assert!(
        (0.0..=1.0).contains(&alpha),
        "alpha {alpha} outside [0, 1]"
    );
    let task_term = tape.scale(task, alpha);
    let kd_term = tape.scale(feat_kd, 1.0 - alpha);
    let total = tape.add(task_term, kd_term);
    let breakdown = LossBreakdown {
        task: tape.value(task).item(),
        feat_kd: tape.value(feat_kd).item(),
        total: tape.value(total).item(),
        alpha,
    };
    (total, breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn identical_features_give_zero() {
        let mut tape = Tape::new();
        let s1 = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let t1 = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let kd = feat_kd_loss(&mut tape, &[(s1, t1)]);
        assert_eq!(tape.value(kd).item(), 0.0);
    }

    #[test]
    fn layer_average_arithmetic() {
        // per-layer MSEs 0.5 and 1.5 average to 1.0
        let mut tape = Tape::new();
        let s1 = tape.constant(t(&[2], &[0.0, 0.0]));
        let t1 = tape.constant(t(&[2], &[1.0, 0.0])); // mse 0.5
        let s2 = tape.constant(t(&[2], &[0.0, 0.0]));
        let t2 = tape.constant(t(&[2], &[1.0, std::f64::consts::SQRT_2])); // mse 1.5
        let kd = feat_kd_loss(&mut tape, &[(s1, t1), (s2, t2)]);
        assert!((tape.value(kd).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn three_layer_pairs_match_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut tape = Tape::new();
        let mut pairs = Vec::new();
        let mut expect = 0.0;
        for _ in 0..3 {
            let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            expect += a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / 6.0;
            let s = tape.constant(t(&[2, 3], &a));
            let te = tape.constant(t(&[2, 3], &b));
            pairs.push((s, te));
        }
        expect /= 3.0;
        let kd = feat_kd_loss(&mut tape, &pairs);
        assert!((tape.value(kd).item() - expect).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "at least one pair")]
    fn empty_pair_list_panics() {
        let mut tape = Tape::new();
        feat_kd_loss(&mut tape, &[]);
    }

    #[test]
    fn alpha_endpoints_are_exact() {
        let mut tape = Tape::new();
        let task = tape.constant(Tensor::scalar(0.731));
        let kd = tape.constant(Tensor::scalar(2.519));
        let (total1, b1) = total_loss(&mut tape, task, kd, 1.0);
        assert_eq!(tape.value(total1).item(), 0.731);
        assert_eq!(b1.total, b1.task);
        let (total0, b0) = total_loss(&mut tape, task, kd, 0.0);
        assert_eq!(tape.value(total0).item(), 2.519);
        assert_eq!(b0.total, b0.feat_kd);
    }

    #[test]
    fn blended_example() {
        let mut tape = Tape::new();
        let task = tape.constant(Tensor::scalar(2.0));
        let kd = tape.constant(Tensor::scalar(4.0));
        let (_, b) = total_loss(&mut tape, task, kd, 0.2);
        assert!((b.total - 3.6).abs() < 1e-15);
    }

    #[test]
    fn linear_in_alpha() {
        let mut tape = Tape::new();
        let task = tape.constant(Tensor::scalar(1.37));
        let kd = tape.constant(Tensor::scalar(0.44));
        for k in 0..=10 {
            let alpha = k as f64 / 10.0;
            let (_, b) = total_loss(&mut tape, task, kd, alpha);
            let expect = 0.44 + alpha * (1.37 - 0.44);
            assert!((b.total - expect).abs() < 1e-12);
        }
    }

    #[test]
    #[should_panic(expected = "outside [0, 1]")]
    fn alpha_out_of_range_panics() {
        let mut tape = Tape::new();
        let task = tape.constant(Tensor::scalar(1.0));
        let kd = tape.constant(Tensor::scalar(1.0));
        total_loss(&mut tape, task, kd, 1.2);
    }

    #[test]
    fn teacher_side_receives_no_gradient() {
        let mut tape = Tape::new();
        let student = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let teacher = tape.constant(t(&[2], &[0.0, 0.0]));
        let kd = feat_kd_loss(&mut tape, &[(student, teacher)]);
        tape.backward(kd);
        assert!(tape.grad(teacher).is_none());
        assert!(tape.grad(student).is_some());
    }
}
