//! Central finite-difference gradient checking.
//!
//! Numeric gradients are computed from forward values only, so they stay
//! independent of every backward rule they are used to check.

use crate::math::tape::{Tape, Var};
use crate::math::tensor::Tensor;

/// Normwise relative error `|a - b|_inf / max(|a|_inf, |b|_inf)`.
pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error: shape mismatch");
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.max_abs().max(b.max_abs());
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of a scalar function with respect to `inputs[which]`.
pub fn numeric_gradient(
    f: &dyn Fn(&[Tensor<f64>]) -> f64,
    inputs: &[Tensor<f64>],
    which: usize,
    h: f64,
) -> Tensor<f64> {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let n = inputs[which].len();
    let mut g = vec![0.0; n];
    for (i, gi) in g.iter_mut().enumerate() {
        let x0 = inputs[which].data()[i];
        work[which].data_mut()[i] = x0 + h;
        let fp = f(&work);
        work[which].data_mut()[i] = x0 - h;
        let fm = f(&work);
        work[which].data_mut()[i] = x0;
        *gi = (fp - fm) / (2.0 * h);
    }
    Tensor::new(inputs[which].shape().to_vec(), g).expect("same shape")
}

/// Compare tape gradients of `build` against central differences.
///
/// `build` receives every input as a differentiable leaf and returns the
/// scalar loss node. Returns the worst relative error over all inputs.
pub fn check_gradients(
    build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var,
    inputs: &[Tensor<f64>],
    h: f64,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).expect("scalar loss");
    let f = |xs: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.param(x.clone())).collect();
        let l = build(&mut t, &vs);
        t.value(l).item()
    };
    let mut worst = 0.0f64;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v);
        let numeric = numeric_gradient(&f, inputs, i, h);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}
