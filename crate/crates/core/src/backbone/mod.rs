//! Desk-scale transformer encoder with a forward pass that can stop after
//! any layer and resume from it.

mod layers;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Param, Scalar, Tape, Tensor, Var};

pub(crate) use layers::dropout;
pub(crate) use layers::uniform;
pub use layers::{Linear, Norm, Parameterized};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Mean over unmasked positions.
    Mean,
    /// First position only (the `[cls]` token).
    Cls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
    pub dropout: f64,
    pub pooling: Pooling,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 128,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            ffn_dim: 128,
            max_seq_len: 16,
            n_classes: 2,
            dropout: 0.1,
            pooling: Pooling::Mean,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn check_split(&self, l: usize) -> Result<()> {
        if l > self.n_layers {
            return Err(Error::config(format!(
                "split point {l} exceeds layer count {}",
                self.n_layers
            )));
        }
        Ok(())
    }

    pub fn check_width(&self, n: usize) -> Result<()> {
        if n == 0 || !self.d_model.is_multiple_of(n) {
            return Err(Error::config(format!(
                "d_model {} not divisible by multiplex width {n}",
                self.d_model
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Padded token ids and their mask, `batch × len`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenBatch {
    pub fn new(batch: usize, len: usize, ids: Vec<usize>, mask: Vec<bool>) -> Result<Self> {
        if batch == 0 || len == 0 || ids.len() != batch * len || mask.len() != ids.len() {
            return Err(Error::shape("token batch", &[batch, len], &[ids.len(), mask.len()]));
        }
        Ok(Self { batch, len, ids, mask })
    }

    /// Stacks equally long rows of `(ids, mask)`, keeping the first `len`
    /// positions of each.
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = (&'a [usize], &'a [bool])>, len: usize) -> Result<Self> {
        let mut ids = Vec::new();
        let mut mask = Vec::new();
        let mut batch = 0;
        for (i, m) in rows {
            if i.len() < len || m.len() < len {
                return Err(Error::shape("token batch row", &[i.len()], &[len]));
            }
            ids.extend_from_slice(&i[..len]);
            mask.extend_from_slice(&m[..len]);
            batch += 1;
        }
        Self::new(batch, len, ids, mask)
    }

    pub fn row_mask(&self, r: usize) -> &[bool] {
        &self.mask[r * self.len..(r + 1) * self.len]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock<S> {
    pub ln1: Norm<S>,
    pub wq: Linear<S>,
    pub wk: Linear<S>,
    pub wv: Linear<S>,
    pub wo: Linear<S>,
    pub ln2: Norm<S>,
    pub ff1: Linear<S>,
    pub ff2: Linear<S>,
}

impl<S: Scalar> EncoderBlock<S> {
    fn new(name: &str, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        Self {
            ln1: Norm::new(&format!("{name}.ln1"), d, cfg.ln_eps),
            wq: Linear::new(&format!("{name}.attn.q"), d, d, rng),
            wk: Linear::new(&format!("{name}.attn.k"), d, d, rng),
            wv: Linear::new(&format!("{name}.attn.v"), d, d, rng),
            wo: Linear::new(&format!("{name}.attn.o"), d, d, rng),
            ln2: Norm::new(&format!("{name}.ln2"), d, cfg.ln_eps),
            ff1: Linear::new(&format!("{name}.ffn.up"), d, cfg.ffn_dim, rng),
            ff2: Linear::new(&format!("{name}.ffn.down"), cfg.ffn_dim, d, rng),
        }
    }

    fn heads(&self, tape: &mut Tape<S>, x: Var, n_heads: usize) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let r = tape.reshape(x, &[b, t, n_heads, d / n_heads])?;
        tape.permute_0213(r)
    }

    /// Attention probabilities `[B, H, T, T]` of this block for input `x`.
    pub fn attention_probs(&self, tape: &mut Tape<S>, x: Var, mask: &[bool], n_heads: usize) -> Result<Var> {
        let a = self.ln1.forward(tape, x)?;
        let q = self.wq.forward(tape, a)?;
        let k = self.wk.forward(tape, a)?;
        self.probs(tape, q, k, mask, n_heads)
    }

    fn probs(&self, tape: &mut Tape<S>, q: Var, k: Var, mask: &[bool], n_heads: usize) -> Result<Var> {
        let dh = tape.value(q).last_dim() / n_heads;
        let qh = self.heads(tape, q, n_heads)?;
        let kh = self.heads(tape, k, n_heads)?;
        let scores = tape.bmm(qh, kh, true)?;
        let scaled = tape.scale(scores, S::from_f64(1.0 / Float::sqrt(dh as f64)));
        tape.softmax(scaled, Some(mask))
    }

    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        mask: &[bool],
        cfg: &EncoderConfig,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let a = self.ln1.forward(tape, x)?;
        let q = self.wq.forward(tape, a)?;
        let k = self.wk.forward(tape, a)?;
        let v = self.wv.forward(tape, a)?;
        let p = self.probs(tape, q, k, mask, cfg.n_heads)?;
        let vh = self.heads(tape, v, cfg.n_heads)?;
        let ctx = tape.bmm(p, vh, false)?;
        let ctx = tape.permute_0213(ctx)?;
        let ctx = tape.reshape(ctx, &s)?;
        let attn = self.wo.forward(tape, ctx)?;
        let attn = dropout(tape, attn, cfg.dropout, rng.as_deref_mut())?;
        let x = tape.add(x, attn)?;

        let b = self.ln2.forward(tape, x)?;
        let f = self.ff1.forward(tape, b)?;
        let f = tape.gelu(f);
        let f = self.ff2.forward(tape, f)?;
        let f = dropout(tape, f, cfg.dropout, rng)?;
        tape.add(x, f)
    }
}

impl<S: Scalar> Parameterized<S> for EncoderBlock<S> {
    fn params(&self) -> Vec<&Param<S>> {
        let mut v = self.ln1.params();
        for l in [&self.wq, &self.wk, &self.wv, &self.wo] {
            v.extend(l.params());
        }
        v.extend(self.ln2.params());
        v.extend(self.ff1.params());
        v.extend(self.ff2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut v = self.ln1.params_mut();
        v.extend(self.wq.params_mut());
        v.extend(self.wk.params_mut());
        v.extend(self.wv.params_mut());
        v.extend(self.wo.params_mut());
        v.extend(self.ln2.params_mut());
        v.extend(self.ff1.params_mut());
        v.extend(self.ff2.params_mut());
        v
    }
}

/// Pre-norm encoder: token + learned positional embeddings, `L` blocks,
/// final layer norm, pooling and a linear classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel<S> {
    config: EncoderConfig,
    pub tok_emb: Param<S>,
    pub pos_emb: Param<S>,
    pub blocks: Vec<EncoderBlock<S>>,
    pub final_ln: Norm<S>,
    pub head: Linear<S>,
}

impl<S: Scalar> EncoderModel<S> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let tok_emb = Param::new("embed.token", uniform(&[config.vocab_size, d], 0.5, &mut rng));
        let pos_emb = Param::new("embed.position", uniform(&[config.max_seq_len, d], 0.5, &mut rng));
        let blocks = (0..config.n_layers)
            .map(|i| EncoderBlock::new(&format!("block{i}"), &config, &mut rng))
            .collect();
        let final_ln = Norm::new("final_ln", d, config.ln_eps);
        let head = Linear::new("head", d, config.n_classes, &mut rng);
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            final_ln,
            head,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Element-type conversion, e.g. the `f64` twin used for gradient checks.
    pub fn cast<T: Scalar>(&self) -> Result<EncoderModel<T>> {
        let mut out = EncoderModel::<T>::new(self.config.clone(), 0)?;
        out.copy_from(self)?;
        out.set_frozen(self.is_frozen());
        Ok(out)
    }

    /// Toggles gradient participation of every backbone parameter,
    /// classifier head included.
    pub fn set_frozen(&mut self, frozen: bool) {
        for p in self.params_mut() {
            p.set_requires_grad(!frozen);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|p| !p.requires_grad())
    }

    fn check_batch(&self, tokens: &TokenBatch) -> Result<()> {
        if tokens.len > self.config.max_seq_len {
            return Err(Error::config(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len, self.config.max_seq_len
            )));
        }
        Ok(())
    }

    /// Hidden states after the embeddings and blocks `0..l`, `[B, T, d]`.
    pub fn forward_prefix(
        &self,
        tape: &mut Tape<S>,
        tokens: &TokenBatch,
        l: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.config.check_split(l)?;
        self.check_batch(tokens)?;
        let table = tape.param(&self.tok_emb);
        let e = tape.embedding(table, &tokens.ids, &[tokens.batch, tokens.len])?;
        let pos_table = tape.param(&self.pos_emb);
        let pos = tape.narrow_rows(pos_table, 0, tokens.len)?;
        let mut h = tape.add_bcast(e, pos)?;
        h = dropout(tape, h, self.config.dropout, rng.as_deref_mut())?;
        for block in &self.blocks[..l] {
            h = block.forward(tape, h, &tokens.mask, &self.config, rng.as_deref_mut())?;
        }
        Ok(h)
    }

    /// Blocks `l..L` followed by the final layer norm.
    pub fn forward_suffix(
        &self,
        tape: &mut Tape<S>,
        h: Var,
        mask: &[bool],
        l: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.config.check_split(l)?;
        let s = tape.shape(h).to_vec();
        if s.len() != 3 || s[2] != self.config.d_model || mask.len() != s[0] * s[1] {
            return Err(Error::shape("forward_suffix", &s, &[self.config.d_model]));
        }
        let mut h = h;
        for block in &self.blocks[l..] {
            h = block.forward(tape, h, mask, &self.config, rng.as_deref_mut())?;
        }
        self.final_ln.forward(tape, h)
    }

    pub fn forward_full(
        &self,
        tape: &mut Tape<S>,
        tokens: &TokenBatch,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let l = self.config.n_layers;
        let h = self.forward_prefix(tape, tokens, l, rng.as_deref_mut())?;
        self.forward_suffix(tape, h, &tokens.mask, l, rng)
    }

    /// Pooled `[B, d]` representation according to the configured pooling.
    pub fn pool(&self, tape: &mut Tape<S>, h: Var, mask: &[bool]) -> Result<Var> {
        match self.config.pooling {
            Pooling::Mean => tape.masked_mean_pool(h, mask),
            Pooling::Cls => {
                let t = tape.shape(h).get(1).copied().unwrap_or(1);
                let cls: Vec<bool> = mask.iter().enumerate().map(|(i, &m)| m && i % t == 0).collect();
                tape.masked_mean_pool(h, &cls)
            }
        }
    }

    pub fn classify(&self, tape: &mut Tape<S>, pooled: Var) -> Result<Var> {
        self.head.forward(tape, pooled)
    }

    pub fn pool_and_classify(&self, tape: &mut Tape<S>, h: Var, mask: &[bool]) -> Result<Var> {
        let p = self.pool(tape, h, mask)?;
        self.classify(tape, p)
    }

    /// Eval-mode logits for a batch, `[B, C]`.
    pub fn logits(&self, tokens: &TokenBatch) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let h = self.forward_full(&mut tape, tokens, None)?;
        let l = self.pool_and_classify(&mut tape, h, &tokens.mask)?;
        Ok(tape.value(l).clone())
    }
}

impl<S: Scalar> Parameterized<S> for EncoderModel<S> {
    fn params(&self) -> Vec<&Param<S>> {
        let mut v = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.final_ln.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut v = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.final_ln.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 20,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            ffn_dim: 12,
            max_seq_len: 5,
            n_classes: 3,
            dropout: 0.0,
            ..EncoderConfig::default()
        }
    }

    fn batch() -> TokenBatch {
        TokenBatch::new(
            2,
            4,
            vec![3, 5, 7, 0, 3, 9, 9, 11],
            vec![true, true, true, false, true, true, true, true],
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig {
            n_heads: 5,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(EncoderConfig::default().check_split(5).is_err());
        assert!(EncoderConfig::default().check_width(3).is_err());
        assert!(EncoderConfig::default().check_width(8).is_ok());
    }

    #[test]
    fn prefix_zero_is_embeddings_only() {
        let m = EncoderModel::<f64>::new(tiny(), 1).unwrap();
        let b = batch();
        let mut tape = Tape::new();
        let h = m.forward_prefix(&mut tape, &b, 0, None).unwrap();
        let v = tape.value(h);
        let d = 8;
        for (r, &id) in b.ids.iter().enumerate() {
            let pos = r % b.len;
            for j in 0..d {
                let want = m.tok_emb.value.data()[id * d + j] + m.pos_emb.value.data()[pos * d + j];
                assert_eq!(v.data()[r * d + j], want);
            }
        }
    }

    #[test]
    fn split_point_beyond_depth_is_config_error() {
        let m = EncoderModel::<f32>::new(tiny(), 1).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            m.forward_prefix(&mut tape, &batch(), 3, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn suffix_at_full_depth_is_final_norm_only() {
        let m = EncoderModel::<f64>::new(tiny(), 2).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(crate::numerics::gradcheck::random_tensor(&[2, 4, 8], 1.0, 3));
        let mask = vec![true; 8];
        let out = m.forward_suffix(&mut tape, h, &mask, 2, None).unwrap();
        let direct = m.final_ln.forward(&mut tape, h).unwrap();
        assert_eq!(tape.value(out), tape.value(direct));
    }

    #[test]
    fn zero_head_gives_uniform_logits_and_lowest_index_prediction() {
        let mut m = EncoderModel::<f32>::new(tiny(), 4).unwrap();
        m.head = Linear::zeros("head", 8, 3);
        let logits = m.logits(&batch()).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        assert_eq!(argmax_rows(&logits), vec![0, 0]);
    }

    #[test]
    fn identical_rows_identical_logits() {
        let m = EncoderModel::<f32>::new(tiny(), 5).unwrap();
        let b = TokenBatch::new(3, 3, vec![4, 6, 8, 4, 6, 8, 4, 6, 8], vec![true; 9]).unwrap();
        let logits = m.logits(&b).unwrap();
        let rows: Vec<&[f32]> = logits.data().chunks(3).collect();
        assert_eq!(rows[0], rows[1]);
        assert_eq!(rows[1], rows[2]);
    }

    #[test]
    fn pooled_matches_direct_masked_mean() {
        let m = EncoderModel::<f64>::new(tiny(), 6).unwrap();
        let b = batch();
        let mut tape = Tape::new();
        let h = m.forward_full(&mut tape, &b, None).unwrap();
        let p = m.pool(&mut tape, h, &b.mask).unwrap();
        let hv = tape.value(h).data().to_vec();
        let pv = tape.value(p).data();
        for r in 0..2 {
            for j in 0..8 {
                let mut num = 0.0;
                let mut den = 0.0;
                for t in 0..4 {
                    let w = if b.mask[r * 4 + t] { 1.0 } else { 0.0 };
                    num += hv[(r * 4 + t) * 8 + j] * w;
                    den += w;
                }
                assert!((pv[r * 8 + j] - num / den).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_masked_row_cannot_be_pooled() {
        let m = EncoderModel::<f32>::new(tiny(), 7).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[1, 2, 8]));
        assert!(matches!(m.pool(&mut tape, h, &[false, false]), Err(Error::Data(_))));
    }

    #[test]
    fn cls_pooling_reads_first_position() {
        let cfg = EncoderConfig {
            pooling: Pooling::Cls,
            ..tiny()
        };
        let m = EncoderModel::<f64>::new(cfg, 8).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_fn(&[1, 3, 8], |i| i as f64));
        let p = m.pool(&mut tape, h, &[true, true, true]).unwrap();
        assert_eq!(tape.value(p).data(), &(0..8).map(|i| i as f64).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn freeze_toggles_every_param() {
        let mut m = EncoderModel::<f32>::new(tiny(), 9).unwrap();
        assert!(!m.is_frozen());
        m.set_frozen(true);
        assert!(m.is_frozen());
        assert!(m.params().iter().all(|p| p.grad.is_none()));
        m.set_frozen(false);
        assert!(m.params().iter().all(|p| p.requires_grad()));
    }
}
