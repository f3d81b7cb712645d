//! Finite-difference gradient oracle shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Relative error with an absolute floor so that exact zeros compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between the tape gradient and central differences
/// (step `eps`) over every element of every input.
pub fn max_grad_error(inputs: &[Tensor], eps: f64, build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |ts: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        (tape, vars, loss)
    };
    let (mut tape, vars, loss) = eval(inputs);
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let mut probe = inputs.to_vec();
            probe[i].data_mut()[j] += eps;
            let (t, _, l) = eval(&probe);
            let up = t.data(l)[0];
            probe[i].data_mut()[j] -= 2.0 * eps;
            let (t, _, l) = eval(&probe);
            let down = t.data(l)[0];
            worst = worst.max(rel_err(analytic[j], (up - down) / (2.0 * eps)));
        }
    }
    worst
}
