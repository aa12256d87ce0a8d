//! Central finite-difference gradient checks in 64-bit.

use ctxc::tensor::{Tape, Tensor, Var};
use ctxc::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const FLOOR: f64 = 1e-4;

fn projection(shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().product::<usize>() as u64);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// `Σ f(inputs) ⊙ R` for a fixed random projection `R`, plus its gradients.
fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], grads: bool) -> (f64, Vec<Tensor<f64>>)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&tape, &vars).expect("graph builds");
    let r = tape.constant(projection(&out.shape()));
    let loss = out.mul(r).unwrap().sum();
    let value = loss.value().item();
    if !grads {
        return (value, Vec::new());
    }
    let g = tape.backward(loss).unwrap();
    (value, vars.iter().map(|&v| g.get_or_zeros(v)).collect())
}

/// Largest element-wise relative error between backprop and central
/// differences over every input entry.
pub fn max_rel_error<F>(f: F, inputs: &[Tensor<f64>]) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let (_, analytic) = evaluate(&f, inputs, true);
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut probe = inputs.to_vec();
            probe[i].data_mut()[j] = input.data()[j] + STEP;
            let (plus, _) = evaluate(&f, &probe, false);
            probe[i].data_mut()[j] = input.data()[j] - STEP;
            let (minus, _) = evaluate(&f, &probe, false);
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}
