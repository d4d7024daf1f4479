#![allow(dead_code)]

use molfuse::numkit::{Tape, Tensor, TensorResult, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor on the denominator so gradients that are
/// essentially zero are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

pub type Scalarize<'a> =
    dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> TensorResult<Var<'t, f64>> + 'a;

/// Compares tape gradients of `f` at `inputs` against central differences.
/// Returns the worst relative error across every input element.
pub fn max_gradient_error(inputs: &[Tensor<f64>], f: &Scalarize<'_>) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars).expect("forward");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).expect("forward").value().item()
    };

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i].data()[k], numeric));
        }
    }
    worst
}

/// `sum(out ⊙ w)` for a fixed random `w`, so every output element carries a
/// distinct upstream gradient.
pub fn weighted_sum<'t>(out: Var<'t, f64>, seed: u64) -> TensorResult<Var<'t, f64>> {
    let mut r = rng(seed ^ 0x9e37_79b9);
    let w = random_tensor(&mut r, &out.shape(), -1.0, 1.0);
    Ok(out.mul(out.tape().constant(w))?.sum())
}
