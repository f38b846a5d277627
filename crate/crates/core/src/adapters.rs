//! Multiplexing and demultiplexing adapters.
//!
//! N down-projected inputs `i₁..i_N` (each `d/N` wide) are mixed by the
//! additive coupling chain
//!
//! ```text
//! o₁ = i₁ + F₁(i_N)
//! o_k = i_k + F_k(o_{k−1})      k = 2..N
//! ```
//!
//! and concatenated into one `d`-wide composite. The demultiplexer undoes
//! the chain with the same `F_k`, last slot first:
//!
//! ```text
//! î_N = ô_N − F_N(ô_{N−1})
//! î_k = ô_k − F_k(ô_{k−1})      k = N−1..2
//! î₁ = ô₁ − F₁(î_N)
//! ```
//!
//! so `demultiplex(multiplex(i)) = i` for any coupling weights. Every map
//! acts independently at each token position.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{EncoderModel, Linear, Parameterized};
use crate::error::{Error, Result};
use crate::numerics::{Param, Scalar, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

/// Feature extraction (backbone frozen) or fine-tuning (backbone trains too).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Fe,
    Ft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Multiplex width N.
    pub n: usize,
    pub d_model: usize,
    /// Hidden width of each coupling MLP; `None` means `2·d/N`.
    pub hidden: Option<usize>,
    pub activation: Activation,
    /// One down/up projection per slot instead of a shared pair.
    pub per_slot_projection: bool,
    /// Zero the second coupling layer so every `F_k` starts as the zero map.
    pub zero_init_couplings: bool,
}

impl AdapterConfig {
    pub fn new(n: usize, d_model: usize) -> Self {
        Self {
            n,
            d_model,
            hidden: None,
            activation: Activation::Gelu,
            per_slot_projection: false,
            zero_init_couplings: true,
        }
    }

    pub fn slot_width(&self) -> usize {
        self.d_model / self.n
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.unwrap_or(2 * self.slot_width())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::config(format!(
                "multiplex width must be at least 2, got {}",
                self.n
            )));
        }
        if !self.d_model.is_multiple_of(self.n) {
            return Err(Error::config(format!(
                "d_model {} not divisible by multiplex width {}",
                self.d_model, self.n
            )));
        }
        if self.hidden == Some(0) {
            return Err(Error::config("coupling hidden width must be positive"));
        }
        Ok(())
    }
}

/// Two-layer MLP `d/N → hidden → d/N`.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingMlp<S> {
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
    pub activation: Activation,
}

impl<S: Scalar> CouplingMlp<S> {
    pub fn new(
        name: &str,
        width: usize,
        hidden: usize,
        activation: Activation,
        zero_out: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fc1 = Linear::new(&format!("{name}.fc1"), width, hidden, rng);
        let fc2 = if zero_out {
            Linear::zeros(&format!("{name}.fc2"), hidden, width)
        } else {
            Linear::new(&format!("{name}.fc2"), hidden, width, rng)
        };
        Self { fc1, fc2, activation }
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = match self.activation {
            Activation::Gelu => tape.gelu(h),
            Activation::Relu => tape.relu(h),
        };
        self.fc2.forward(tape, h)
    }

    pub fn is_zero_map(&self) -> bool {
        self.fc2.weight.value.data().iter().all(|v| *v == S::zero())
            && self.fc2.bias.value.data().iter().all(|v| *v == S::zero())
    }
}

impl<S: Scalar> Parameterized<S> for CouplingMlp<S> {
    fn params(&self) -> Vec<&Param<S>> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut v = self.fc1.params_mut();
        v.extend(self.fc2.params_mut());
        v
    }
}

/// The trainable bundle: down projection, couplings `F₁..F_N` (used by
/// both directions), up projection.
#[derive(Clone, Debug, PartialEq)]
pub struct RevMuxAdapters<S> {
    config: AdapterConfig,
    pub down: Vec<Linear<S>>,
    pub up: Vec<Linear<S>>,
    pub couplings: Vec<CouplingMlp<S>>,
}

impl<S: Scalar> RevMuxAdapters<S> {
    pub fn new(config: AdapterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, w, h) = (config.d_model, config.slot_width(), config.hidden_width());
        let projections = if config.per_slot_projection { config.n } else { 1 };
        let name = |base: &str, k: usize| {
            if config.per_slot_projection {
                format!("adapter.{base}{}", k + 1)
            } else {
                format!("adapter.{base}")
            }
        };
        let down = (0..projections)
            .map(|k| Linear::new(&name("down", k), d, w, &mut rng))
            .collect();
        let up = (0..projections)
            .map(|k| Linear::new(&name("up", k), w, d, &mut rng))
            .collect();
        let couplings = (0..config.n)
            .map(|k| {
                CouplingMlp::new(
                    &format!("adapter.coupling{}", k + 1),
                    w,
                    h,
                    config.activation,
                    config.zero_init_couplings,
                    &mut rng,
                )
            })
            .collect();
        Ok(Self {
            config,
            down,
            up,
            couplings,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn n(&self) -> usize {
        self.config.n
    }

    pub fn slot_width(&self) -> usize {
        self.config.slot_width()
    }

    pub fn cast<T: Scalar>(&self) -> Result<RevMuxAdapters<T>> {
        let mut out = RevMuxAdapters::<T>::new(self.config.clone(), 0)?;
        out.copy_from(self)?;
        Ok(out)
    }

    fn projection(list: &[Linear<S>], slot: usize) -> &Linear<S> {
        &list[slot.min(list.len() - 1)]
    }

    /// `f_down` for `slot`: `[.., d] → [.., d/N]`.
    pub fn down_project(&self, tape: &mut Tape<S>, h: Var, slot: usize) -> Result<Var> {
        let d = tape.value(h).last_dim();
        if d != self.config.d_model {
            return Err(Error::shape("down_project", tape.shape(h), &[self.config.d_model]));
        }
        Self::projection(&self.down, slot).forward(tape, h)
    }

    /// `f_up` for `slot`: `[.., d/N] → [.., d]`.
    pub fn up_project(&self, tape: &mut Tape<S>, i: Var, slot: usize) -> Result<Var> {
        if tape.value(i).last_dim() != self.slot_width() {
            return Err(Error::shape("up_project", tape.shape(i), &[self.slot_width()]));
        }
        Self::projection(&self.up, slot).forward(tape, i)
    }

    fn check_inputs(&self, tape: &Tape<S>, inputs: &[Var]) -> Result<()> {
        if inputs.len() != self.n() {
            return Err(Error::config(format!(
                "multiplexer configured for {} inputs, got {}",
                self.n(),
                inputs.len()
            )));
        }
        let first = tape.shape(inputs[0]);
        if *first.last().unwrap() != self.slot_width() {
            return Err(Error::shape("multiplex", first, &[self.slot_width()]));
        }
        for &v in &inputs[1..] {
            if tape.shape(v) != first {
                return Err(Error::shape("multiplex", first, tape.shape(v)));
            }
        }
        Ok(())
    }

    /// Mixes N slot inputs into one composite, `[.., d]`.
    pub fn multiplex(&self, tape: &mut Tape<S>, inputs: &[Var]) -> Result<Var> {
        self.check_inputs(tape, inputs)?;
        let n = self.n();
        let mut outs = Vec::with_capacity(n);
        let f = self.couplings[0].forward(tape, inputs[n - 1])?;
        outs.push(tape.add(inputs[0], f)?);
        for k in 1..n {
            let f = self.couplings[k].forward(tape, outs[k - 1])?;
            outs.push(tape.add(inputs[k], f)?);
        }
        tape.concat_last(&outs)
    }

    /// Exact inverse of [`multiplex`](Self::multiplex).
    pub fn demultiplex(&self, tape: &mut Tape<S>, composite: Var) -> Result<Vec<Var>> {
        let n = self.n();
        if tape.value(composite).last_dim() != self.config.d_model {
            return Err(Error::shape(
                "demultiplex",
                tape.shape(composite),
                &[self.config.d_model],
            ));
        }
        let o = tape.split_last(composite, n)?;
        let mut rec: Vec<Option<Var>> = alloc::vec![None; n];
        for k in (1..n).rev() {
            let f = self.couplings[k].forward(tape, o[k - 1])?;
            rec[k] = Some(tape.sub(o[k], f)?);
        }
        let last = rec[n - 1].expect("n >= 2");
        let f = self.couplings[0].forward(tape, last)?;
        rec[0] = Some(tape.sub(o[0], f)?);
        Ok(rec.into_iter().map(|v| v.expect("filled")).collect())
    }

    /// The two-input form written with `F = F₁`, `G = F₂`:
    /// `o₁ = i₁ + F(i₂)`, `o₂ = i₂ + G(o₁)`.
    pub fn multiplex_pair(&self, tape: &mut Tape<S>, i1: Var, i2: Var) -> Result<Var> {
        if self.n() != 2 {
            return Err(Error::config("pair multiplexer needs N = 2"));
        }
        self.check_inputs(tape, &[i1, i2])?;
        let (f, g) = (&self.couplings[0], &self.couplings[1]);
        let fi2 = f.forward(tape, i2)?;
        let o1 = tape.add(i1, fi2)?;
        let go1 = g.forward(tape, o1)?;
        let o2 = tape.add(i2, go1)?;
        tape.concat_last(&[o1, o2])
    }

    /// `î₂ = ô₂ − G(ô₁)`, `î₁ = ô₁ − F(î₂)`.
    pub fn demultiplex_pair(&self, tape: &mut Tape<S>, composite: Var) -> Result<(Var, Var)> {
        if self.n() != 2 {
            return Err(Error::config("pair demultiplexer needs N = 2"));
        }
        let parts = tape.split_last(composite, 2)?;
        let (f, g) = (&self.couplings[0], &self.couplings[1]);
        let go1 = g.forward(tape, parts[0])?;
        let i2 = tape.sub(parts[1], go1)?;
        let fi2 = f.forward(tape, i2)?;
        let i1 = tape.sub(parts[0], fi2)?;
        Ok((i1, i2))
    }
}

impl<S: Scalar> Parameterized<S> for RevMuxAdapters<S> {
    fn params(&self) -> Vec<&Param<S>> {
        let mut v: Vec<&Param<S>> = self.down.iter().flat_map(|l| l.params()).collect();
        v.extend(self.up.iter().flat_map(|l| l.params()));
        v.extend(self.couplings.iter().flat_map(|c| c.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut v: Vec<&mut Param<S>> = self.down.iter_mut().flat_map(|l| l.params_mut()).collect();
        v.extend(self.up.iter_mut().flat_map(|l| l.params_mut()));
        v.extend(self.couplings.iter_mut().flat_map(|c| c.params_mut()));
        v
    }
}

/// Parameters updated during training: the adapters alone in FE mode, the
/// adapters and every backbone tensor in FT mode.
pub fn trainable_parameters<'a, S: Scalar>(
    adapters: &'a RevMuxAdapters<S>,
    model: &'a EncoderModel<S>,
    mode: TrainMode,
) -> Vec<&'a Param<S>> {
    let mut v = adapters.params();
    if mode == TrainMode::Ft {
        v.extend(model.params());
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::random_tensor;
    use crate::numerics::Tensor;

    fn adapters(n: usize, d: usize, seed: u64) -> RevMuxAdapters<f64> {
        let cfg = AdapterConfig {
            zero_init_couplings: false,
            ..AdapterConfig::new(n, d)
        };
        RevMuxAdapters::new(cfg, seed).unwrap()
    }

    #[test]
    fn config_rules() {
        assert!(AdapterConfig::new(1, 8).validate().is_err());
        assert!(AdapterConfig::new(3, 8).validate().is_err());
        assert_eq!(AdapterConfig::new(4, 64).hidden_width(), 32);
    }

    #[test]
    fn zero_couplings_give_plain_concat_and_split() {
        let a = RevMuxAdapters::<f64>::new(AdapterConfig::new(4, 16), 0).unwrap();
        assert!(a.couplings.iter().all(|c| c.is_zero_map()));
        let mut tape = Tape::new();
        let ins: Vec<Var> = (0..4)
            .map(|k| tape.constant(random_tensor(&[2, 3, 4], 1.0, k)))
            .collect();
        let o = a.multiplex(&mut tape, &ins).unwrap();
        let cat = tape.concat_last(&ins).unwrap();
        assert_eq!(tape.value(o), tape.value(cat));
        let back = a.demultiplex(&mut tape, cat).unwrap();
        for (b, i) in back.iter().zip(&ins) {
            assert_eq!(tape.value(*b), tape.value(*i));
        }
    }

    #[test]
    fn constant_first_coupling() {
        // F₁ ≡ c (zero fc2 weights, bias c), F₂ ≡ 0.
        let mut a = RevMuxAdapters::<f64>::new(AdapterConfig::new(2, 4), 1).unwrap();
        a.couplings[0].fc2.bias.value = Tensor::from_f64(&[2], &[0.5, -2.0]).unwrap();
        let mut tape = Tape::new();
        let i1 = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let i2 = tape.constant(Tensor::from_f64(&[1, 2], &[3.0, 4.0]).unwrap());
        let o = a.multiplex(&mut tape, &[i1, i2]).unwrap();
        assert_eq!(tape.value(o).data(), &[1.5, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn pair_inverse_matches_hand_solution_on_scalars() {
        // Width-1 slots, F(x) = relu(a·x)·b, G(x) = relu(c·x)·e. Solving
        // o₁ = i₁ + F(i₂), o₂ = i₂ + G(o₁) by hand gives
        // i₂ = o₂ − G(o₁), i₁ = o₁ − F(o₂ − G(o₁)).
        let mut a = RevMuxAdapters::<f64>::new(
            AdapterConfig {
                hidden: Some(1),
                activation: Activation::Relu,
                ..AdapterConfig::new(2, 2)
            },
            0,
        )
        .unwrap();
        let set = |l: &mut Linear<f64>, w: f64| l.weight.value = Tensor::from_f64(&[1, 1], &[w]).unwrap();
        set(&mut a.couplings[0].fc1, 2.0);
        set(&mut a.couplings[0].fc2, 0.75);
        set(&mut a.couplings[1].fc1, -1.5);
        set(&mut a.couplings[1].fc2, 3.0);
        let f = |x: f64| (2.0 * x).max(0.0) * 0.75;
        let g = |x: f64| (-1.5 * x).max(0.0) * 3.0;
        for (o1, o2) in [(0.3, -1.2), (-0.8, 2.5), (1.7, 0.4)] {
            let i2 = o2 - g(o1);
            let i1 = o1 - f(i2);
            let mut tape = Tape::new();
            let c = tape.constant(Tensor::from_f64(&[1, 2], &[o1, o2]).unwrap());
            let rec = a.demultiplex(&mut tape, c).unwrap();
            assert!((tape.value(rec[0]).data()[0] - i1).abs() < 1e-15);
            assert!((tape.value(rec[1]).data()[0] - i2).abs() < 1e-15);
        }
    }

    #[test]
    fn round_trip_general_widths() {
        for n in [2, 4, 8] {
            let a = adapters(n, 32, n as u64);
            let mut tape = Tape::new();
            let ins: Vec<Var> = (0..n)
                .map(|k| tape.constant(random_tensor(&[2, 3, 32 / n], 2.0, 100 + k as u64)))
                .collect();
            let o = a.multiplex(&mut tape, &ins).unwrap();
            let back = a.demultiplex(&mut tape, o).unwrap();
            for (b, i) in back.iter().zip(&ins) {
                assert!(tape.value(*b).max_abs_diff(tape.value(*i)).unwrap() <= 1e-12);
            }
        }
    }

    #[test]
    fn order_matters() {
        let a = adapters(2, 8, 3);
        let mut tape = Tape::new();
        let x = tape.constant(random_tensor(&[1, 4], 1.0, 1));
        let y = tape.constant(random_tensor(&[1, 4], 1.0, 2));
        let xy = a.multiplex(&mut tape, &[x, y]).unwrap();
        let yx = a.multiplex(&mut tape, &[y, x]).unwrap();
        assert!(tape.value(xy).max_abs_diff(tape.value(yx)).unwrap() > 1e-3);
    }

    #[test]
    fn parameter_count_closed_form() {
        use crate::backbone::Parameterized;
        let cfg = AdapterConfig {
            hidden: Some(128),
            ..AdapterConfig::new(2, 64)
        };
        let a = RevMuxAdapters::<f32>::new(cfg, 0).unwrap();
        // down 64→32, up 32→64, two couplings 32→128→32.
        let expect = (64 * 32 + 32) + (32 * 64 + 64) + 2 * (32 * 128 + 128 + 128 * 32 + 32);
        assert_eq!(a.param_count(), expect);
        assert_eq!(a.param_count(), 20896);
    }

    #[test]
    fn wrong_slot_count_is_config_error() {
        let a = adapters(4, 16, 0);
        let mut tape = Tape::new();
        let x = tape.constant(random_tensor(&[1, 4], 1.0, 1));
        assert!(matches!(a.multiplex(&mut tape, &[x, x]), Err(Error::Config(_))));
    }

    #[test]
    fn truncating_down_projection() {
        let mut a = RevMuxAdapters::<f64>::new(AdapterConfig::new(2, 6), 0).unwrap();
        a.down[0].weight.value = Tensor::from_fn(&[6, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let h = tape.constant(random_tensor(&[2, 6], 1.0, 4));
        let i = a.down_project(&mut tape, h, 0).unwrap();
        let hv = tape.value(h).data().to_vec();
        assert_eq!(tape.value(i).data(), &[hv[0], hv[1], hv[2], hv[6], hv[7], hv[8]]);

        a.down[0].weight.value = Tensor::zeros(&[6, 3]);
        a.up[0].weight.value = Tensor::zeros(&[3, 6]);
        let mut tape = Tape::new();
        let h = tape.constant(random_tensor(&[2, 6], 1.0, 4));
        let i = tape.constant(random_tensor(&[2, 3], 1.0, 5));
        let z = a.down_project(&mut tape, h, 0).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
        let u = a.up_project(&mut tape, i, 0).unwrap();
        assert!(tape.value(u).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_shape_errors() {
        let a = adapters(2, 8, 0);
        let mut tape = Tape::new();
        let bad = tape.constant(random_tensor(&[1, 5], 1.0, 0));
        assert!(matches!(a.down_project(&mut tape, bad, 0), Err(Error::Shape { .. })));
        assert!(matches!(a.up_project(&mut tape, bad, 0), Err(Error::Shape { .. })));
    }
}
