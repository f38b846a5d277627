//! Central finite-difference gradient checking in `f64`.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Denominator floor of the relative error, so that entries whose true
/// gradient is zero are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the tape's gradient of `f` with respect to each input against
/// `(f(x + eps) − f(x − eps)) / 2eps`, element by element. `f` must return a
/// single-element tensor.
pub fn check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|g| g.to_vec());
        for j in 0..inputs[which].numel() {
            let orig = work[which].data()[j];
            work[which].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[which].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[which].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.as_ref().map_or(0.0, |g| g[j]);
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Reduces `v` to a scalar through a fixed pseudo-random weighting, so every
/// output element contributes a distinct coefficient to the checked gradient.
pub fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let shape = tape.shape(v).to_vec();
    let w = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let w = tape.constant(w);
    let prod = tape.mul(v, w)?;
    Ok(tape.sum_all(prod))
}

/// Uniform `[-scale, scale)` tensor from a seed.
pub fn random_tensor(shape: &[usize], scale: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}
