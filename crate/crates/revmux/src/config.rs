//! TOML run configuration. Every section is optional; unknown keys are
//! rejected. Command-line flags override the loaded values.

use std::path::{Path, PathBuf};

use revmux_core::adapters::{Activation, AdapterConfig};
use revmux_core::backbone::EncoderConfig;
use revmux_core::data::{synth_task, tokenize_all, Encoded, Example, SynthKind, Vocab};
use revmux_core::evaluation::{DEFAULT_FLOPS_BATCH, DEFAULT_FLOPS_SEQ_LEN, DEFAULT_ROUNDS};
use revmux_core::numerics::optim::AdamConfig;
use revmux_core::pipeline::{PretrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::dataset::load_jsonl;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives initialization, training order and evaluation grouping.
    pub seed: u64,
    pub model: EncoderConfig,
    pub pretrain: PretrainSection,
    /// `train.seed` must stay unset; the top-level seed is used.
    pub train: TrainConfig,
    pub adapters: AdapterSection,
    pub eval: EvalSection,
    pub data: DataSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub warmup_frac: f64,
    /// Eval accuracy below this fails the command.
    pub min_accuracy: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            epochs: p.epochs,
            batch_size: p.batch_size,
            adam: p.adam,
            warmup_frac: p.warmup_frac,
            min_accuracy: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    pub hidden: Option<usize>,
    pub activation: Activation,
    pub per_slot_projection: bool,
}

impl Default for AdapterSection {
    fn default() -> Self {
        let a = AdapterConfig::new(2, 2);
        Self {
            hidden: a.hidden,
            activation: a.activation,
            per_slot_projection: a.per_slot_projection,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub rounds: usize,
    pub batch_groups: usize,
    /// Widths for `flops` and `sweep`.
    pub n_set: Vec<usize>,
    /// Split points for `sweep`; empty means every layer.
    pub l_set: Vec<usize>,
    pub flops_batch: usize,
    pub flops_seq_len: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            rounds: DEFAULT_ROUNDS,
            batch_groups: 64,
            n_set: vec![1, 2, 4, 8],
            l_set: Vec::new(),
            flops_batch: DEFAULT_FLOPS_BATCH,
            flops_seq_len: DEFAULT_FLOPS_SEQ_LEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Synthetic task used when `train` is unset.
    pub kind: SynthKind,
    pub n_train: usize,
    pub n_eval: usize,
    /// Seed of the synthetic generator, kept apart from the run seed so
    /// every command sees the same data.
    pub seed: u64,
    /// JSONL training file.
    pub train: Option<PathBuf>,
    /// JSONL evaluation files, each reported separately.
    pub eval: Vec<PathBuf>,
    pub min_count: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            kind: SynthKind::Keyword,
            n_train: 4000,
            n_eval: 1000,
            seed: 0,
            train: None,
            eval: Vec::new(),
            min_count: 1,
        }
    }
}

/// Evaluation sets with display names.
pub type Named<T> = Vec<(String, Vec<T>)>;

/// Tokenized splits.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab: Vocab,
    pub train: Vec<Encoded>,
    pub evals: Named<Encoded>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.message().to_string())?;
        if cfg.train.seed != 0 {
            return Err("train.seed is not used; set the top-level seed".into());
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain.epochs,
            batch_size: self.pretrain.batch_size,
            adam: self.pretrain.adam,
            warmup_frac: self.pretrain.warmup_frac,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn adapter_config(&self, n: usize, d_model: usize) -> AdapterConfig {
        AdapterConfig {
            hidden: self.adapters.hidden,
            activation: self.adapters.activation,
            per_slot_projection: self.adapters.per_slot_projection,
            ..AdapterConfig::new(n, d_model)
        }
    }

    pub fn l_set(&self, n_layers: usize) -> Vec<usize> {
        if self.eval.l_set.is_empty() {
            (0..=n_layers).collect()
        } else {
            self.eval.l_set.clone()
        }
    }

    fn examples(&self, n_classes: usize) -> Result<(Vec<Example>, Named<Example>)> {
        let d = &self.data;
        match &d.train {
            Some(train) => {
                if d.eval.is_empty() {
                    return Err(Error::config(
                        "data.eval must list at least one file when data.train is set",
                    ));
                }
                let evals = d
                    .eval
                    .iter()
                    .map(|p| {
                        let name = p
                            .file_stem()
                            .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into());
                        Ok((name, load_jsonl(p, n_classes)?))
                    })
                    .collect::<Result<_>>()?;
                Ok((load_jsonl(train, n_classes)?, evals))
            }
            None => {
                if !d.eval.is_empty() {
                    return Err(Error::config("data.eval needs data.train"));
                }
                let s = synth_task(d.kind, d.n_train, d.n_eval, d.seed)?;
                let name = match d.kind {
                    SynthKind::Keyword => "keyword",
                    SynthKind::Pair => "pair",
                };
                Ok((s.train, vec![(name.to_string(), s.eval)]))
            }
        }
    }

    /// Loads or generates the data and tokenizes it against `vocab`, or a
    /// vocabulary built from the training split when `vocab` is `None`.
    pub fn prepare(&self, model: &EncoderConfig, vocab: Option<&Vocab>) -> Result<Prepared> {
        let (train, evals) = self.examples(model.n_classes)?;
        let vocab = match vocab {
            Some(v) => v.clone(),
            None => Vocab::build(&train, self.data.min_count, model.vocab_size)?,
        };
        if vocab.len() > model.vocab_size {
            return Err(Error::config(format!(
                "vocabulary has {} ids but the model embeds only {}",
                vocab.len(),
                model.vocab_size
            )));
        }
        let t = model.max_seq_len;
        Ok(Prepared {
            train: tokenize_all(&train, &vocab, t),
            evals: evals
                .into_iter()
                .map(|(n, e)| (n, tokenize_all(&e, &vocab, t)))
                .collect(),
            vocab,
        })
    }
}
