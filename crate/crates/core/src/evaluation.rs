//! Multi-round grouped evaluation and the analytical FLOPs accountant.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, RevMuxAdapters};
use crate::backbone::{argmax_rows, EncoderConfig, EncoderModel};
use crate::data::Encoded;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape};
use crate::pipeline::{revmux_forward, revmux_forward_cached, CompositeBatch, PrefixCache};

/// Rounds per evaluation unless told otherwise.
pub const DEFAULT_ROUNDS: usize = 10;
pub const DEFAULT_FLOPS_BATCH: usize = 32;
pub const DEFAULT_FLOPS_SEQ_LEN: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub n: usize,
    pub l: usize,
    pub rounds: usize,
    pub seed: u64,
    /// Echoed into the report only.
    pub lambda: Option<f64>,
    /// Groups per forward pass.
    pub batch_groups: usize,
    pub dataset: String,
}

impl EvalSpec {
    pub fn new(n: usize, l: usize, seed: u64) -> Self {
        Self {
            n,
            l,
            rounds: DEFAULT_ROUNDS,
            seed,
            lambda: None,
            batch_groups: 64,
            dataset: "eval".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEcho {
    pub n: usize,
    pub l: usize,
    pub lambda: Option<f64>,
    pub seed: u64,
    pub rounds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub rounds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Accuracy of each round, in round order.
    pub rounds: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `rounds`.
    pub std: f64,
    pub per_dataset: Vec<DatasetScore>,
    pub config: EvalEcho,
    /// Per-example correctness of each round (not serialized).
    #[serde(skip)]
    pub correct: Vec<Vec<bool>>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, Float::sqrt(var))
}

impl EvalReport {
    /// Reduces per-round outcomes given in any order.
    pub fn from_rounds(spec: &EvalSpec, mut outcomes: Vec<(usize, RoundOutcome)>) -> Self {
        outcomes.sort_by_key(|(r, _)| *r);
        let rounds: Vec<f64> = outcomes.iter().map(|(_, o)| o.accuracy).collect();
        let (mean, std) = mean_std(&rounds);
        Self {
            per_dataset: vec![DatasetScore {
                name: spec.dataset.clone(),
                mean,
                std,
                rounds: rounds.clone(),
            }],
            rounds,
            mean,
            std,
            config: EvalEcho {
                n: spec.n,
                l: spec.l,
                lambda: spec.lambda,
                seed: spec.seed,
                rounds: spec.rounds,
            },
            correct: outcomes.into_iter().map(|(_, o)| o.correct).collect(),
        }
    }

    /// Averages equally long reports round by round, keeping each one's
    /// dataset entries.
    pub fn merge(parts: Vec<EvalReport>) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::data("nothing to merge"));
        };
        let t = first.rounds.len();
        if parts.iter().any(|p| p.rounds.len() != t) {
            return Err(Error::data("reports have different round counts"));
        }
        let rounds: Vec<f64> = (0..t)
            .map(|r| parts.iter().map(|p| p.rounds[r]).sum::<f64>() / parts.len() as f64)
            .collect();
        let (mean, std) = mean_std(&rounds);
        let config = first.config.clone();
        Ok(Self {
            rounds,
            mean,
            std,
            per_dataset: parts.iter().flat_map(|p| p.per_dataset.clone()).collect(),
            config,
            correct: Vec::new(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutcome {
    pub accuracy: f64,
    /// Correctness per dataset index.
    pub correct: Vec<bool>,
}

/// Independent seeds for `t` rounds derived from `seed`.
pub fn round_seeds(seed: u64, t: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..t).map(|_| rng.next_u64()).collect()
}

/// Groups for one round: a seeded shuffle split into `n` subsets by
/// striding; group `g` takes the `g`-th member of each subset. Missing
/// members are filled with the group's first entry and flagged `false`.
pub fn round_groups(len: usize, n: usize, seed: u64) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let count = len.div_ceil(n);
    let mut groups = Vec::with_capacity(count);
    let mut real = Vec::with_capacity(count);
    for g in 0..count {
        let head = order[g * n];
        let mut members = Vec::with_capacity(n);
        let mut flags = Vec::with_capacity(n);
        for j in 0..n {
            match order.get(g * n + j) {
                Some(&i) => {
                    members.push(i);
                    flags.push(true);
                }
                None => {
                    members.push(head);
                    flags.push(false);
                }
            }
        }
        groups.push(members);
        real.push(flags);
    }
    (groups, real)
}

/// One grouped pass over `data`. `adapters = None` requires `n = 1`.
/// `cache`, when given, must be built from `data` at depth `l`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_round<S: Scalar>(
    model: &EncoderModel<S>,
    adapters: Option<&RevMuxAdapters<S>>,
    data: &[Encoded],
    n: usize,
    l: usize,
    seed: u64,
    batch_groups: usize,
    cache: Option<&PrefixCache<S>>,
) -> Result<RoundOutcome> {
    if n == 0 || data.len() < n {
        return Err(Error::data(alloc::format!(
            "{} evaluation examples cannot fill a group of {n}",
            data.len()
        )));
    }
    let (groups, real) = round_groups(data.len(), n, seed);
    let mut correct = vec![false; data.len()];
    for (gs, flags) in groups.chunks(batch_groups.max(1)).zip(real.chunks(batch_groups.max(1))) {
        let batch = CompositeBatch::new(data, gs, l)?;
        let mut tape = Tape::new();
        let out = match (adapters, cache) {
            (Some(a), Some(c)) => revmux_forward_cached(&mut tape, model, a, &batch, c)?,
            _ => revmux_forward(&mut tape, model, adapters, &batch, None)?,
        };
        for (k, &logits) in out.logits.iter().enumerate() {
            let pred = argmax_rows(tape.value(logits));
            for (g, p) in pred.into_iter().enumerate() {
                if flags[g][k] {
                    let i = gs[g][k];
                    correct[i] = p == data[i].label;
                }
            }
        }
    }
    let hits = correct.iter().filter(|&&c| c).count();
    Ok(RoundOutcome {
        accuracy: hits as f64 / data.len() as f64,
        correct,
    })
}

/// `spec.rounds` grouped passes with per-round seeds drawn from `spec.seed`.
pub fn evaluate_rounds<S: Scalar>(
    model: &EncoderModel<S>,
    adapters: Option<&RevMuxAdapters<S>>,
    data: &[Encoded],
    spec: &EvalSpec,
    cache: Option<&PrefixCache<S>>,
) -> Result<EvalReport> {
    if spec.rounds == 0 {
        return Err(Error::config("at least one evaluation round is required"));
    }
    let mut outcomes = Vec::with_capacity(spec.rounds);
    for (r, s) in round_seeds(spec.seed, spec.rounds).into_iter().enumerate() {
        outcomes.push((
            r,
            evaluate_round(model, adapters, data, spec.n, spec.l, s, spec.batch_groups, cache)?,
        ));
    }
    Ok(EvalReport::from_rounds(spec, outcomes))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub accuracy: f64,
    pub cumulative: f64,
}

/// Empirical CDF of values: one point per distinct value.
pub fn cdf(values: &[f64]) -> Vec<CdfPoint> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<CdfPoint> = Vec::new();
    for (i, &x) in v.iter().enumerate() {
        let point = CdfPoint {
            accuracy: x,
            cumulative: (i + 1) as f64 / n,
        };
        match out.last_mut() {
            Some(last) if last.accuracy == x => *last = point,
            _ => out.push(point),
        }
    }
    out
}

/// CDF of round accuracies from per-example correctness of each round.
pub fn accuracy_cdf(correct: &[Vec<bool>]) -> Vec<CdfPoint> {
    let accs: Vec<f64> = correct
        .iter()
        .map(|r| r.iter().filter(|&&c| c).count() as f64 / r.len().max(1) as f64)
        .collect();
    cdf(&accs)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub embeddings: u64,
    pub prefix_layers: u64,
    /// Remaining layers plus the final layer norm.
    pub suffix_layers: u64,
    pub adapters: u64,
    /// Pooling and classifier.
    pub head: u64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u64 {
        self.embeddings + self.prefix_layers + self.suffix_layers + self.adapters + self.head
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub n: usize,
    pub l: usize,
    pub batch: usize,
    pub seq_len: usize,
    /// `batch` single-input forwards.
    pub flops_single: u64,
    /// `batch` composite forwards, each serving `n` inputs.
    pub flops_composite: u64,
    /// `n·flops_single / flops_composite`, in percent.
    pub speedup_pct: f64,
    pub single: FlopsBreakdown,
    pub composite: FlopsBreakdown,
}

fn block_flops(cfg: &EncoderConfig, bt: u64, t: u64) -> u64 {
    let (d, f, h) = (cfg.d_model as u64, cfg.ffn_dim as u64, cfg.n_heads as u64);
    let b = bt / t;
    let projections = 4 * (2 * bt * d * d + bt * d);
    let attention = 2 * (2 * b * t * t * d) + 2 * b * h * t * t;
    let ffn = 2 * bt * d * f + 2 * bt * f + 2 * bt * f * d + bt * d;
    let norms_and_residuals = 4 * bt * d;
    projections + attention + ffn + norms_and_residuals
}

fn coupling_flops(w: u64, hidden: u64, bt: u64) -> u64 {
    2 * bt * w * hidden + 2 * bt * hidden + 2 * bt * hidden * w + bt * w
}

/// Analytical flop counts: a multiply-accumulate is 2 flops, bias adds,
/// norms, activations, softmax, residuals and scalings 1 per element,
/// lookups and reshapes free. `adapters = None` means identity mixing.
pub fn count_flops(
    cfg: &EncoderConfig,
    adapters: Option<&AdapterConfig>,
    n: usize,
    l: usize,
    batch: usize,
    seq_len: usize,
) -> Result<FlopsReport> {
    cfg.validate()?;
    cfg.check_split(l)?;
    if n == 0 || batch == 0 || seq_len == 0 {
        return Err(Error::config("n, batch and seq_len must be positive"));
    }
    if let Some(a) = adapters {
        a.validate()?;
        if a.n != n || a.d_model != cfg.d_model {
            return Err(Error::config("adapter config does not match n / d_model"));
        }
    }
    let (t, d, c) = (seq_len as u64, cfg.d_model as u64, cfg.n_classes as u64);
    let bt = batch as u64 * t;
    let big_l = cfg.n_layers as u64;
    let nn = n as u64;
    let block = block_flops(cfg, bt, t);
    let embed = bt * d;
    let final_ln = bt * d;
    let head = bt * d + 2 * batch as u64 * d * c + batch as u64 * c;
    let adapter = adapters.map_or(0, |a| {
        let (w, hd) = (a.slot_width() as u64, a.hidden_width() as u64);
        let down = 2 * bt * d * w + bt * w;
        let up = 2 * bt * w * d + bt * d;
        let chain = coupling_flops(w, hd, bt) + bt * w;
        nn * (down + up + 2 * chain)
    });
    let l = l as u64;
    let single = FlopsBreakdown {
        embeddings: embed,
        prefix_layers: l * block,
        suffix_layers: (big_l - l) * block + final_ln,
        adapters: 0,
        head,
    };
    let composite = FlopsBreakdown {
        embeddings: nn * embed,
        prefix_layers: nn * l * block,
        suffix_layers: (big_l - l) * block + final_ln,
        adapters: adapter,
        head: nn * head,
    };
    let (fs, fc) = (single.total(), composite.total());
    Ok(FlopsReport {
        n,
        l: l as usize,
        batch,
        seq_len,
        flops_single: fs,
        flops_composite: fc,
        speedup_pct: 100.0 * (nn * fs) as f64 / fc as f64,
        single,
        composite,
    })
}

/// Flop reports for every split point `0..=L`.
pub fn flops_sweep(
    cfg: &EncoderConfig,
    adapters: Option<&AdapterConfig>,
    n: usize,
    batch: usize,
    seq_len: usize,
) -> Result<Vec<FlopsReport>> {
    (0..=cfg.n_layers)
        .map(|l| count_flops(cfg, adapters, n, l, batch, seq_len))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_cover_every_index_once() {
        for (len, n) in [(10, 3), (9, 3), (7, 1), (5, 4)] {
            let (groups, real) = round_groups(len, n, 3);
            assert_eq!(groups.len(), len.div_ceil(n));
            let mut seen: Vec<usize> = groups
                .iter()
                .zip(&real)
                .flat_map(|(g, r)| g.iter().zip(r).filter(|(_, &f)| f).map(|(&i, _)| i))
                .collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..len).collect::<Vec<_>>());
            assert!(groups.iter().all(|g| g.len() == n));
        }
    }

    #[test]
    fn cdf_is_monotone_and_ends_at_one() {
        let pts = cdf(&[0.7, 0.5, 0.7, 0.9]);
        assert_eq!(
            pts,
            vec![
                CdfPoint {
                    accuracy: 0.5,
                    cumulative: 0.25
                },
                CdfPoint {
                    accuracy: 0.7,
                    cumulative: 0.75
                },
                CdfPoint {
                    accuracy: 0.9,
                    cumulative: 1.0
                },
            ]
        );
        assert_eq!(
            cdf(&[0.3]),
            vec![CdfPoint {
                accuracy: 0.3,
                cumulative: 1.0
            }]
        );
        let from_bits = accuracy_cdf(&[vec![true, false], vec![true, true]]);
        assert_eq!(from_bits.last().unwrap().cumulative, 1.0);
        assert_eq!(from_bits[0].accuracy, 0.5);
    }

    #[test]
    fn layers_only_speedup_is_forced_by_counting() {
        // Twelve wide layers dominate every other term.
        let cfg = EncoderConfig {
            d_model: 768,
            n_heads: 12,
            n_layers: 12,
            ffn_dim: 3072,
            ..EncoderConfig::default()
        };
        for (l, want) in [(0, 200.0), (6, 24.0 / 18.0 * 100.0)] {
            let r = count_flops(&cfg, None, 2, l, 32, 128).unwrap();
            let layers = |b: &FlopsBreakdown| (b.prefix_layers + b.suffix_layers) as f64;
            let s = 200.0 * layers(&r.single) / layers(&r.composite);
            assert!((s - want).abs() < 0.1, "l={l}: {s}");
        }
    }

    #[test]
    fn identity_width_one_has_no_speedup_or_loss() {
        let cfg = EncoderConfig::default();
        for l in 0..=cfg.n_layers {
            let r = count_flops(&cfg, None, 1, l, 4, 16).unwrap();
            assert_eq!(r.flops_single, r.flops_composite);
            assert_eq!(r.speedup_pct, 100.0);
        }
    }

    #[test]
    fn split_beyond_depth_rejected() {
        assert!(count_flops(&EncoderConfig::default(), None, 2, 5, 1, 1).is_err());
    }
}
