use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Param, Scalar, Tape, Tensor, Var};

/// Anything that owns named parameters.
pub trait Parameterized<S: Scalar> {
    fn params(&self) -> Vec<&Param<S>>;
    fn params_mut(&mut self) -> Vec<&mut Param<S>>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    fn trainable_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.requires_grad())
            .map(|p| p.value.numel())
            .sum()
    }

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    /// Overwrites parameter values by name from `src`, converting the
    /// element type. Every parameter of `self` must be present in `src`.
    fn copy_from<T: Scalar>(&mut self, src: &impl Parameterized<T>) -> Result<()> {
        let theirs = src.params();
        for p in self.params_mut() {
            let q = theirs
                .iter()
                .find(|q| q.name() == p.name())
                .ok_or_else(|| Error::config(format!("missing parameter {}", p.name())))?;
            if q.value.shape() != p.value.shape() {
                return Err(Error::shape("copy_from", p.value.shape(), q.value.shape()));
            }
            p.value = q.value.cast();
        }
        Ok(())
    }
}

pub(crate) fn uniform<S: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::from_f64(rng.gen_range(-bound..bound)))
}

/// Affine map over the trailing axis: `x·W + b`, `W` stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
}

impl<S: Scalar> Linear<S> {
    /// Fan-in uniform weights, zero bias.
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / Float::sqrt(fan_in as f64);
        Self {
            weight: Param::new(format!("{name}.weight"), uniform(&[fan_in, fan_out], bound, rng)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn zeros(name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bcast(y, b)
    }
}

impl<S: Scalar> Parameterized<S> for Linear<S> {
    fn params(&self) -> Vec<&Param<S>> {
        alloc::vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        alloc::vec![&mut self.weight, &mut self.bias]
    }
}

/// Layer normalization parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm<S> {
    pub gain: Param<S>,
    pub bias: Param<S>,
    pub eps: f64,
}

impl<S: Scalar> Norm<S> {
    pub fn new(name: &str, d: usize, eps: f64) -> Self {
        Self {
            gain: Param::new(format!("{name}.gain"), Tensor::filled(&[d], S::one())),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[d])),
            eps,
        }
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        tape.layernorm(x, g, b, self.eps)
    }
}

impl<S: Scalar> Parameterized<S> for Norm<S> {
    fn params(&self) -> Vec<&Param<S>> {
        alloc::vec![&self.gain, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        alloc::vec![&mut self.gain, &mut self.bias]
    }
}

/// Inverted dropout through a constant keep-mask.
pub(crate) fn dropout<S: Scalar>(tape: &mut Tape<S>, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = S::from_f64(1.0 / (1.0 - rate));
    let shape = tape.shape(x).to_vec();
    let mask = Tensor::from_fn(&shape, |_| if rng.gen::<f64>() < rate { S::zero() } else { keep });
    let m = tape.constant(mask);
    tape.mul(x, m)
}
