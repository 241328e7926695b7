#![allow(dead_code)]

use rankvqa::finite_diff::{finite_diff_grad, max_relative_error};
use rankvqa::{Result, Rng, Tensor};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn normal(rng: &mut Rng, shape: &[usize]) -> Vec<f64> {
    (0..shape.iter().product::<usize>()).map(|_| rng.normal()).collect()
}

pub fn param(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::param(shape.to_vec(), normal(rng, shape)).unwrap()
}

/// Worst relative error between backward() and central differences for every
/// input of `f`. Non-scalar outputs are contracted with fixed random weights
/// so every output element contributes a distinct cotangent.
pub fn op_gradcheck(
    inputs: &[Tensor],
    rng: &mut Rng,
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
) -> f64 {
    let out = f(inputs).unwrap();
    let weights = Tensor::new(out.shape().to_vec(), normal(rng, out.shape())).unwrap();
    let reduce = |y: Tensor| -> Result<Tensor> { Ok(y.mul(&weights)?.sum()) };
    inputs.iter().for_each(|t| t.zero_grad());
    reduce(out).unwrap().backward().unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
        let numeric = finite_diff_grad(
            |probe| {
                let mut args = inputs.to_vec();
                args[i] = probe.clone();
                Ok(reduce(f(&args)?)?.item())
            },
            x,
            H,
        )
        .unwrap();
        worst = worst.max(max_relative_error(&analytic, &numeric.to_vec()));
    }
    worst
}
