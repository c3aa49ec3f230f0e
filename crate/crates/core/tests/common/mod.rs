//! Shared helpers for the integration tests: finite-difference gradient
//! checking against the tape, and small tensor constructors.

#![allow(dead_code)]

use diffseg::tensor::{Tape, Tensor, Var};
use diffseg::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Evaluate `build` once to get tape gradients for every input leaf,
/// then compare each gradient entry against a central finite difference
/// at f64. Returns the worst relative error over all entries.
pub fn max_rel_grad_err<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&tape, &vars).expect("finite-difference forward pass");
        tape.value(out).item()
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&tape, &vars).expect("forward pass");
    assert_eq!(tape.value(out).len(), 1, "build must return a scalar");
    let grads = tape.backward(out).expect("backward pass");

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let g = grads.get_or_zero(vars[i], t.shape());
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ad = g.data()[j];
            let err = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

/// Standard-normal tensor with a fixed seed.
pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, &mut rng)
}

/// Strictly positive tensor (for log / sqrt / division domains).
pub fn randn_positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut t = randn(shape, seed);
    for v in t.data_mut() {
        *v = 0.5 + v.abs();
    }
    t
}
