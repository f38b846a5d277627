//! Grouping, the multiplexed forward pass and the training loops.
//!
//! For a group `X₁..X_N`:
//!
//! ```text
//! h_k = prefix(X_k, l)        i_k = f_down(h_k)
//! o   = multiplex(i₁..i_N)    ô   = suffix(o, l)
//! î   = demultiplex(ô)        ĥ_k = pool(f_up(î_k))     logits_k = W_c·ĥ_k
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{RevMuxAdapters, TrainMode};
use crate::backbone::{argmax_rows, EncoderModel, Parameterized, TokenBatch};
use crate::data::Encoded;
use crate::error::{Error, Result};
use crate::evaluation::evaluate_round;
use crate::numerics::optim::{warmup_linear, Adam, AdamConfig};
use crate::numerics::{Gradients, Param, Scalar, Tape, Tensor, Var};
use crate::objectives::{combined_loss, LossBreakdown, DEFAULT_LAMBDA};

/// `B` groups of `N` instances. Slot `k` of every group lives in
/// `slots[k]`; all slots share one padded length.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeBatch {
    pub n: usize,
    pub l: usize,
    pub len: usize,
    pub slots: Vec<TokenBatch>,
    pub labels: Vec<Vec<usize>>,
    /// Dataset index of each slot entry, `indices[k][g]`.
    pub indices: Vec<Vec<usize>>,
}

impl CompositeBatch {
    /// `groups[g][k]` is the index into `data` placed in slot `k` of group `g`.
    pub fn new(data: &[Encoded], groups: &[Vec<usize>], l: usize) -> Result<Self> {
        let n = groups.first().map(Vec::len).unwrap_or(0);
        if n == 0 {
            return Err(Error::data("empty group batch"));
        }
        let mut len = 1;
        for g in groups {
            if g.len() != n {
                return Err(Error::shape("composite group", &[n], &[g.len()]));
            }
            for &i in g {
                let ex = data.get(i).ok_or(Error::Index {
                    op: "composite group",
                    index: i,
                    bound: data.len(),
                })?;
                len = len.max(ex.len());
            }
        }
        let mut slots = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut indices = Vec::with_capacity(n);
        for k in 0..n {
            let idx: Vec<usize> = groups.iter().map(|g| g[k]).collect();
            slots.push(TokenBatch::from_rows(
                idx.iter().map(|&i| (data[i].ids.as_slice(), data[i].mask.as_slice())),
                len,
            )?);
            labels.push(idx.iter().map(|&i| data[i].label).collect());
            indices.push(idx);
        }
        Ok(Self {
            n,
            l,
            len,
            slots,
            labels,
            indices,
        })
    }

    pub fn batch(&self) -> usize {
        self.slots[0].batch
    }

    /// A composite position is live wherever any slot has a real token.
    pub fn composite_mask(&self) -> Vec<bool> {
        let mut m = self.slots[0].mask.clone();
        for s in &self.slots[1..] {
            for (a, &b) in m.iter_mut().zip(&s.mask) {
                *a |= b;
            }
        }
        m
    }
}

/// Per-slot outputs of one multiplexed pass: logits `[B, C]` and pooled
/// representations `[B, d]`, in slot order.
#[derive(Clone, Debug)]
pub struct SlotOutputs {
    pub logits: Vec<Var>,
    pub pooled: Vec<Var>,
}

/// Per-instance hidden states after the first `l` layers, kept at full
/// padded length so any group can slice them.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixCache<S> {
    l: usize,
    states: Vec<Tensor<S>>,
}

impl<S: Scalar> PrefixCache<S> {
    pub fn build(model: &EncoderModel<S>, data: &[Encoded], l: usize) -> Result<Self> {
        model.config().check_split(l)?;
        let mut states = Vec::with_capacity(data.len());
        let d = model.config().d_model;
        for chunk in data.chunks(64) {
            let full = chunk[0].ids.len();
            let tokens = TokenBatch::from_rows(chunk.iter().map(|e| (e.ids.as_slice(), e.mask.as_slice())), full)?;
            let mut tape = Tape::new();
            let h = model.forward_prefix(&mut tape, &tokens, l, None)?;
            let v = tape.value(h);
            for r in 0..chunk.len() {
                states.push(v.narrow0(r, 1)?.reshape(&[full, d])?);
            }
        }
        Ok(Self { l, states })
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Stacks the first `len` positions of the listed instances, `[B, len, d]`.
    pub fn gather(&self, tape: &mut Tape<S>, indices: &[usize], len: usize) -> Result<Var> {
        let mut parts = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self.states.get(i).ok_or(Error::Index {
                op: "prefix cache",
                index: i,
                bound: self.states.len(),
            })?;
            parts.push(s.narrow0(0, len)?);
        }
        let refs: Vec<&Tensor<S>> = parts.iter().collect();
        let d = parts[0].last_dim();
        let stacked = Tensor::stack(&refs)?.reshape(&[indices.len(), len, d])?;
        Ok(tape.constant(stacked))
    }
}

fn mux_from_prefix<S: Scalar>(
    tape: &mut Tape<S>,
    model: &EncoderModel<S>,
    adapters: &RevMuxAdapters<S>,
    group: &CompositeBatch,
    prefix: &[Var],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<SlotOutputs> {
    let mut inputs = Vec::with_capacity(group.n);
    for (k, &h) in prefix.iter().enumerate() {
        inputs.push(adapters.down_project(tape, h, k)?);
    }
    let o = adapters.multiplex(tape, &inputs)?;
    let mask = group.composite_mask();
    let o_hat = model.forward_suffix(tape, o, &mask, group.l, rng)?;
    let rec = adapters.demultiplex(tape, o_hat)?;
    let mut out = SlotOutputs {
        logits: Vec::with_capacity(group.n),
        pooled: Vec::with_capacity(group.n),
    };
    for (k, i) in rec.into_iter().enumerate() {
        let u = adapters.up_project(tape, i, k)?;
        let p = model.pool(tape, u, &group.slots[k].mask)?;
        out.logits.push(model.classify(tape, p)?);
        out.pooled.push(p);
    }
    Ok(out)
}

fn check_group<S: Scalar>(
    model: &EncoderModel<S>,
    adapters: Option<&RevMuxAdapters<S>>,
    group: &CompositeBatch,
) -> Result<()> {
    model.config().check_split(group.l)?;
    let want = adapters.map_or(1, RevMuxAdapters::n);
    if group.n != want {
        return Err(Error::config(format!(
            "group width {} does not match multiplex width {want}",
            group.n
        )));
    }
    Ok(())
}

/// The multiplexed forward pass. With `adapters = None` the group must
/// have a single slot and the pass is plain single-input inference.
pub fn revmux_forward<S: Scalar>(
    tape: &mut Tape<S>,
    model: &EncoderModel<S>,
    adapters: Option<&RevMuxAdapters<S>>,
    group: &CompositeBatch,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<SlotOutputs> {
    check_group(model, adapters, group)?;
    let Some(adapters) = adapters else {
        let tokens = &group.slots[0];
        let h = model.forward_full(tape, tokens, rng)?;
        let p = model.pool(tape, h, &tokens.mask)?;
        let logits = model.classify(tape, p)?;
        return Ok(SlotOutputs {
            logits: vec![logits],
            pooled: vec![p],
        });
    };
    let mut prefix = Vec::with_capacity(group.n);
    for slot in &group.slots {
        prefix.push(model.forward_prefix(tape, slot, group.l, rng.as_deref_mut())?);
    }
    mux_from_prefix(tape, model, adapters, group, &prefix, rng)
}

/// [`revmux_forward`] with prefix states read from `cache` (indexed like
/// the data the group was built from). No gradient reaches the prefix.
pub fn revmux_forward_cached<S: Scalar>(
    tape: &mut Tape<S>,
    model: &EncoderModel<S>,
    adapters: &RevMuxAdapters<S>,
    group: &CompositeBatch,
    cache: &PrefixCache<S>,
) -> Result<SlotOutputs> {
    check_group(model, Some(adapters), group)?;
    if cache.l() != group.l {
        return Err(Error::config(format!(
            "prefix cache built for l={}, group uses l={}",
            cache.l(),
            group.l
        )));
    }
    let mut prefix = Vec::with_capacity(group.n);
    for idx in &group.indices {
        prefix.push(cache.gather(tape, idx, group.len)?);
    }
    mux_from_prefix(tape, model, adapters, group, &prefix, None)
}

/// Full-depth, one-by-one pooled representations `[n, d]` of the listed
/// instances, computed in eval mode.
pub fn teacher_forward<S: Scalar>(model: &EncoderModel<S>, data: &[Encoded], indices: &[usize]) -> Result<Tensor<S>> {
    let d = model.config().d_model;
    let mut rows = Vec::with_capacity(indices.len() * d);
    for chunk in indices.chunks(64) {
        let tokens = token_batch(data, chunk)?;
        let mut tape = Tape::new();
        let h = model.forward_full(&mut tape, &tokens, None)?;
        let p = model.pool(&mut tape, h, &tokens.mask)?;
        rows.extend_from_slice(tape.value(p).data());
    }
    Tensor::new(vec![indices.len(), d], rows)
}

/// Rows of `data` padded to the longest among them.
pub fn token_batch(data: &[Encoded], indices: &[usize]) -> Result<TokenBatch> {
    let mut len = 1;
    for &i in indices {
        let ex = data.get(i).ok_or(Error::Index {
            op: "token batch",
            index: i,
            bound: data.len(),
        })?;
        len = len.max(ex.len());
    }
    TokenBatch::from_rows(
        indices
            .iter()
            .map(|&i| (data[i].ids.as_slice(), data[i].mask.as_slice())),
        len,
    )
}

/// Seeded shuffle of `0..count` cut into consecutive groups of `n`;
/// a short tail is dropped.
pub fn training_groups(count: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    order.chunks_exact(n.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n: usize,
    pub l: usize,
    pub lambda: f64,
    pub temperature: f64,
    pub mode: TrainMode,
    /// Adapter optimizer; `adam.lr` is the adapter step size.
    pub adam: AdamConfig,
    /// Step size for backbone tensors in FT mode.
    pub backbone_lr: f64,
    pub warmup_frac: f64,
    pub epochs: usize,
    pub groups_per_batch: usize,
    pub seed: u64,
    /// Epochs without held-out improvement before stopping.
    pub patience: usize,
    /// Fraction of the training data held out for early stopping.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n: 2,
            l: 2,
            lambda: DEFAULT_LAMBDA,
            temperature: 1.0,
            mode: TrainMode::Fe,
            adam: AdamConfig::default(),
            backbone_lr: 2e-5,
            warmup_frac: 0.05,
            epochs: 10,
            groups_per_batch: 16,
            seed: 0,
            patience: 3,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::config("adapter training needs N >= 2"));
        }
        if !(self.lambda >= 0.0) || !(self.temperature > 0.0) {
            return Err(Error::config("lambda must be >= 0 and temperature > 0"));
        }
        if self.epochs == 0 || self.groups_per_batch == 0 {
            return Err(Error::config("epochs and groups_per_batch must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::config("val_fraction and warmup_frac must lie in [0, 1)"));
        }
        if !(self.adam.lr > 0.0) || !(self.backbone_lr >= 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub warmup_frac: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 32,
            adam: AdamConfig::default(),
            warmup_frac: 0.05,
            seed: 0,
        }
    }
}

/// One optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub ce: f64,
    pub infonce: f64,
    pub total: f64,
    pub acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub infonce: f64,
    pub total: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    fn close_epoch(&mut self, epoch: usize, from: usize, val_acc: Option<f64>) -> EpochLog {
        let rows = &self.steps[from..];
        let k = rows.len().max(1) as f64;
        let mean = |f: fn(&StepLog) -> f64| rows.iter().map(f).sum::<f64>() / k;
        let e = EpochLog {
            epoch,
            ce: mean(|r| r.ce),
            infonce: mean(|r| r.infonce),
            total: mean(|r| r.total),
            train_acc: mean(|r| r.acc),
            val_acc,
        };
        self.epochs.push(e);
        e
    }
}

fn split_holdout(len: usize, frac: f64, min: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    let k = Float::ceil(len as f64 * frac) as usize;
    if frac <= 0.0 || k < min || len - k < min {
        return (order, Vec::new());
    }
    let val = order.split_off(len - k);
    (order, val)
}

fn subset(data: &[Encoded], idx: &[usize]) -> Vec<Encoded> {
    idx.iter().map(|&i| data[i].clone()).collect()
}

fn param_grad_norm<S: Scalar>(params: &[&Param<S>], grads: &Gradients<S>) -> f64 {
    Float::sqrt(
        params
            .iter()
            .filter_map(|p| grads.param(p.name()))
            .flat_map(|g| g.iter().map(|x| x.to_f64_lossy() * x.to_f64_lossy()))
            .sum::<f64>(),
    )
}

fn correct_count<S: Scalar>(tape: &Tape<S>, logits: &[Var], labels: &[Vec<usize>]) -> usize {
    logits
        .iter()
        .zip(labels)
        .map(|(&l, y)| argmax_rows(tape.value(l)).iter().zip(y).filter(|(p, y)| p == y).count())
        .sum()
}

/// Trains the adapters (and, in FT mode, the backbone) on `data` grouped
/// into N-tuples. The parameters of the best held-out epoch are restored
/// before returning. FE mode never touches the backbone.
pub fn train_adapters<S: Scalar>(
    model: &mut EncoderModel<S>,
    adapters: &mut RevMuxAdapters<S>,
    data: &[Encoded],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    model.config().check_split(cfg.l)?;
    if adapters.n() != cfg.n {
        return Err(Error::config(format!(
            "adapters built for N={}, training asks for N={}",
            adapters.n(),
            cfg.n
        )));
    }
    let n = cfg.n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train_idx, val_idx) = split_holdout(data.len(), cfg.val_fraction, n, &mut rng);
    if train_idx.len() < n {
        return Err(Error::data(format!(
            "{} training examples cannot fill a group of {n}",
            data.len()
        )));
    }
    let train = subset(data, &train_idx);
    let val = subset(data, &val_idx);

    let fe = cfg.mode == TrainMode::Fe;
    model.set_frozen(fe);
    let (prefix, teacher, val_prefix) = if fe {
        let all: Vec<usize> = (0..train.len()).collect();
        (
            Some(PrefixCache::build(model, &train, cfg.l)?),
            Some(teacher_forward(model, &train, &all)?),
            if val.is_empty() {
                None
            } else {
                Some(PrefixCache::build(model, &val, cfg.l)?)
            },
        )
    } else {
        (None, None, None)
    };

    let groups_per_epoch = train.len() / n;
    let steps_per_epoch = groups_per_epoch.div_ceil(cfg.groups_per_batch);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup = Float::ceil(total_steps as f64 * cfg.warmup_frac) as usize;
    let mut adam = Adam::new(cfg.adam);
    let mut backbone_adam = Adam::new(AdamConfig {
        lr: cfg.backbone_lr,
        ..cfg.adam
    });
    let d = model.config().d_model;

    let mut log = TrainLog::default();
    let mut best: Option<(f64, RevMuxAdapters<S>, Option<EncoderModel<S>>)> = None;
    let mut stale = 0;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let first_row = log.steps.len();
        let groups = training_groups(train.len(), n, &mut rng);
        for batch in groups.chunks(cfg.groups_per_batch) {
            let group = CompositeBatch::new(&train, batch, cfg.l)?;
            let b = group.batch();
            let mut tape = Tape::new();
            let out = match &prefix {
                Some(cache) => revmux_forward_cached(&mut tape, model, adapters, &group, cache)?,
                None => revmux_forward(&mut tape, model, Some(adapters), &group, None)?,
            };
            // Teacher rows in group-major order: [B, N, d].
            let members: Vec<usize> = batch.iter().flatten().copied().collect();
            let t_rows = match &teacher {
                Some(all) => {
                    let mut data = Vec::with_capacity(members.len() * d);
                    for &i in &members {
                        data.extend_from_slice(&all.data()[i * d..(i + 1) * d]);
                    }
                    Tensor::new(vec![b, n, d], data)?
                }
                None => teacher_forward(model, &train, &members)?.reshape(&[b, n, d])?,
            };
            let teacher_var = tape.constant(t_rows);
            let stacked = tape.concat_last(&out.pooled)?;
            let student = tape.reshape(stacked, &[b, n, d])?;
            let labels: Vec<&[usize]> = group.labels.iter().map(Vec::as_slice).collect();
            let (loss, parts): (Var, LossBreakdown) = combined_loss(
                &mut tape,
                &out.logits,
                &labels,
                student,
                teacher_var,
                cfg.lambda,
                cfg.temperature,
            )?;
            let grads = tape.backward(loss)?;

            let lr = warmup_linear(cfg.adam.lr, step, warmup, total_steps);
            if !parts.total.is_finite() {
                let ps = adapters.params();
                return Err(Error::NonFinite {
                    step,
                    lr,
                    grad_norm: param_grad_norm(&ps, &grads),
                });
            }
            if fe {
                if let Some(p) = model.params().iter().find(|p| grads.param(p.name()).is_some()) {
                    return Err(Error::config(format!(
                        "backbone parameter {} received a gradient in FE mode",
                        p.name()
                    )));
                }
            }
            adam.step(&mut adapters.params_mut(), &grads, lr);
            if !fe {
                let blr = warmup_linear(cfg.backbone_lr, step, warmup, total_steps);
                backbone_adam.step(&mut model.params_mut(), &grads, blr);
            }
            let acc = correct_count(&tape, &out.logits, &group.labels) as f64 / (b * n) as f64;
            log.steps.push(StepLog {
                step,
                epoch,
                ce: parts.ce,
                infonce: parts.infonce,
                total: parts.total,
                acc,
            });
            step += 1;
        }

        let val_acc = if val.is_empty() {
            None
        } else {
            let r = evaluate_round(model, Some(adapters), &val, n, cfg.l, cfg.seed, 64, val_prefix.as_ref())?;
            Some(r.accuracy)
        };
        let summary = log.close_epoch(epoch, first_row, val_acc);
        let score = val_acc.unwrap_or(summary.train_acc);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, adapters.clone(), (!fe).then(|| model.clone())));
            log.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience.max(1) {
                log.stopped_early = epoch + 1 < cfg.epochs;
                break;
            }
        }
    }
    if let Some((_, a, m)) = best {
        *adapters = a;
        if let Some(m) = m {
            *model = m;
        }
    }
    Ok(log)
}

/// Supervised training of the full encoder (with dropout) on single inputs.
pub fn pretrain_backbone<S: Scalar>(
    model: &mut EncoderModel<S>,
    data: &[Encoded],
    cfg: &PretrainConfig,
) -> Result<TrainLog> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::config("epochs and batch_size must be positive"));
    }
    if data.is_empty() {
        return Err(Error::data("no training examples"));
    }
    model.set_frozen(false);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d20b);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = Float::ceil(total as f64 * cfg.warmup_frac) as usize;
    let mut adam = Adam::new(cfg.adam);
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let first_row = log.steps.len();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let tokens = token_batch(data, idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data[i].label).collect();
            let mut tape = Tape::new();
            let h = model.forward_full(&mut tape, &tokens, Some(&mut drop_rng))?;
            let logits = model.pool_and_classify(&mut tape, h, &tokens.mask)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let ce = tape.value(loss).data()[0].to_f64_lossy();
            let grads = tape.backward(loss)?;
            let lr = warmup_linear(cfg.adam.lr, step, warmup, total);
            if !ce.is_finite() {
                let ps = model.params();
                return Err(Error::NonFinite {
                    step,
                    lr,
                    grad_norm: param_grad_norm(&ps, &grads),
                });
            }
            adam.step(&mut model.params_mut(), &grads, lr);
            let acc = correct_count(&tape, &[logits], &[labels]) as f64 / idx.len() as f64;
            log.steps.push(StepLog {
                step,
                epoch,
                ce,
                infonce: 0.0,
                total: ce,
                acc,
            });
            step += 1;
        }
        log.close_epoch(epoch, first_row, None);
        log.best_epoch = epoch;
    }
    Ok(log)
}

/// Eval-mode accuracy of the plain single-input model.
pub fn backbone_accuracy<S: Scalar>(model: &EncoderModel<S>, data: &[Encoded]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::data("no evaluation examples"));
    }
    let mut correct = 0;
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(64) {
        let tokens = token_batch(data, idx)?;
        let pred = argmax_rows(&model.logits(&tokens)?);
        correct += idx.iter().zip(pred).filter(|(&i, p)| data[i].label == *p).count();
    }
    Ok(correct as f64 / data.len() as f64)
}
