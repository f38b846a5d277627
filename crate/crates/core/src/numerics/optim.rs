use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use super::tape::{Gradients, Param};
use super::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) decay, applied as `θ ← θ − lr·wd·θ`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction. Moments are tracked in `f64` and keyed by
/// parameter name.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that requires grad and has a gradient
    /// in `grads`; `lr` overrides the configured rate (for schedules).
    pub fn step<S: Scalar>(&mut self, params: &mut [&mut Param<S>], grads: &Gradients<S>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - Float::powi(b1, t);
        let c2 = 1.0 - Float::powi(b2, t);
        for p in params.iter_mut() {
            if !p.requires_grad() {
                continue;
            }
            let Some(g) = grads.param(p.name()) else { continue };
            let st = self.state.entry(p.name().into()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for (j, x) in p.value.data_mut().iter_mut().enumerate() {
                let gj = g[j].to_f64_lossy();
                st.m[j] = b1 * st.m[j] + (1.0 - b1) * gj;
                st.v[j] = b2 * st.v[j] + (1.0 - b2) * gj * gj;
                let mhat = st.m[j] / c1;
                let vhat = st.v[j] / c2;
                let mut xv = x.to_f64_lossy();
                xv -= lr * self.cfg.weight_decay * xv;
                xv -= lr * mhat / (Float::sqrt(vhat) + self.cfg.eps);
                *x = S::from_f64(xv);
            }
        }
    }
}

/// Linear warmup over the first `warmup` steps, then linear decay to zero
/// at `total`.
pub fn warmup_linear(base_lr: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if warmup > 0 && step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    let rest = total.saturating_sub(warmup).max(1);
    let done = step.saturating_sub(warmup);
    base_lr * (1.0 - done as f64 / rest as f64).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};

    #[test]
    fn first_step_matches_closed_form() {
        // loss = 0.5·a·w² ⇒ g = a·w. After one Adam step the bias-corrected
        // moments are g and g², so Δw = −lr·g/(|g| + eps).
        let (a, w0, lr) = (3.0f64, 0.7f64, 0.01);
        let mut p = Param::new("w", Tensor::scalar(w0));
        let mut tape = Tape::new();
        let w = tape.param(&p);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.scale(sq, 0.5 * a);
        let grads = tape.backward(loss).unwrap();
        let g = a * w0;
        assert!((grads.param("w").unwrap()[0] - g).abs() < 1e-15);

        let cfg = AdamConfig {
            lr,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg);
        opt.step(&mut [&mut p], &grads, lr);
        let expected = w0 - lr * g / (g.abs() + cfg.eps);
        assert!((p.value.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn frozen_params_are_untouched() {
        let mut p = Param::new("w", Tensor::<f32>::scalar(1.5));
        let mut tape = Tape::new();
        let w = tape.param(&p);
        let loss = tape.sum_all(w);
        let grads = tape.backward(loss).unwrap();
        p.set_requires_grad(false);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut [&mut p], &grads, 0.1);
        assert_eq!(p.value.data()[0], 1.5);
    }

    #[test]
    fn schedule_shape() {
        assert!((warmup_linear(1.0, 0, 10, 100) - 0.1).abs() < 1e-12);
        assert!((warmup_linear(1.0, 9, 10, 100) - 1.0).abs() < 1e-12);
        assert!((warmup_linear(1.0, 55, 10, 100) - 0.5).abs() < 1e-12);
        assert_eq!(warmup_linear(1.0, 100, 10, 100), 0.0);
        assert_eq!(warmup_linear(2.0, 0, 0, 10), 2.0);
    }
}
