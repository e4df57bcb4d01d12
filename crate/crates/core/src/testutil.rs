//! Finite-difference helpers shared by the unit tests.

use crate::graph::{Tape, Var};
use crate::tensor::Tensor;

/// Worst relative error between tape gradients and central finite
/// differences, over every coordinate of every input.
///
/// `floor` guards the denominator so coordinates whose true gradient is
/// (near) zero are compared absolutely rather than blowing up.
pub fn max_fd_error<F>(inputs: &[Tensor], eps: f64, floor: f64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = build(&mut tape, &vars);
    tape.backward(root);
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            tape.grad(*v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let root = build(&mut tape, &vars);
        tape.value(root).item()
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let orig = input.data()[i];
            // use the actually-representable step
            let hi = orig + eps;
            let lo = orig - eps;
            let denom = hi - lo;
            work[k].data_mut()[i] = hi;
            let f_hi = eval(&work);
            work[k].data_mut()[i] = lo;
            let f_lo = eval(&work);
            work[k].data_mut()[i] = orig;
            let numeric = (f_hi - f_lo) / denom;
            let a = analytic[k][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}
