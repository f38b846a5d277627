//! Examples, vocabulary, tokenization and synthetic tasks.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SEP: usize = 2;
pub const CLS: usize = 3;
pub const RESERVED: [&str; 4] = ["[pad]", "[unk]", "[sep]", "[cls]"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: usize,
}

impl Example {
    pub fn new(text_a: impl Into<String>, text_b: Option<String>, label: usize, n_classes: usize) -> Result<Self> {
        let text_a = text_a.into();
        if text_a.trim().is_empty() {
            return Err(Error::data("empty text"));
        }
        if label >= n_classes {
            return Err(Error::data(format!("label {label} outside 0..{n_classes}")));
        }
        Ok(Self { text_a, text_b, label })
    }

    fn words(&self) -> impl Iterator<Item = &str> {
        self.text_a
            .split_whitespace()
            .chain(self.text_b.iter().flat_map(|b| b.split_whitespace()))
    }
}

/// Token ↔ id map. Ids `0..4` are reserved (`[pad] [unk] [sep] [cls]`);
/// the `i`-th learned token has id `i + 4`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) || RESERVED.contains(&t.as_str()) {
                return Err(Error::data(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i + RESERVED.len()).is_some() {
                return Err(Error::data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Whitespace tokens seen at least `min_count` times, most frequent
    /// first (ties alphabetical), capped so the vocabulary has at most
    /// `max_size` ids.
    pub fn build(examples: &[Example], min_count: usize, max_size: usize) -> Result<Self> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for ex in examples {
            for w in ex.words() {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !RESERVED.contains(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max_size.saturating_sub(RESERVED.len()));
        Self::from_tokens(ranked.into_iter().map(|(w, _)| w.to_string()).collect())
    }

    /// Learned tokens in id order (serialization order).
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Total id count, reserved ids included.
    pub fn len(&self) -> usize {
        self.tokens.len() + RESERVED.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        if id < RESERVED.len() {
            Some(RESERVED[id])
        } else {
            self.tokens.get(id - RESERVED.len()).map(String::as_str)
        }
    }
}

/// A tokenized example padded to the encoder's `max_seq_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub label: usize,
}

impl Encoded {
    /// Number of real (unmasked) positions.
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `[cls] a… ([sep] b…)`, truncated to `max_len`, padded with `[pad]`.
pub fn tokenize(ex: &Example, vocab: &Vocab, max_len: usize) -> Encoded {
    let mut ids = vec![CLS];
    ids.extend(ex.text_a.split_whitespace().map(|w| vocab.id(w)));
    if let Some(b) = &ex.text_b {
        if !b.trim().is_empty() {
            ids.push(SEP);
            ids.extend(b.split_whitespace().map(|w| vocab.id(w)));
        }
    }
    ids.truncate(max_len);
    let real = ids.len();
    ids.resize(max_len, PAD);
    let mask = (0..max_len).map(|i| i < real).collect();
    Encoded {
        ids,
        mask,
        label: ex.label,
    }
}

pub fn tokenize_all(examples: &[Example], vocab: &Vocab, max_len: usize) -> Vec<Encoded> {
    examples.iter().map(|e| tokenize(e, vocab, max_len)).collect()
}

/// Inverse of [`tokenize`] for in-vocabulary text: returns `(a, b)`.
pub fn detokenize(vocab: &Vocab, ids: &[usize]) -> (String, Option<String>) {
    let mut a = Vec::new();
    let mut b: Option<Vec<&str>> = None;
    for &id in ids {
        match id {
            PAD => break,
            CLS => {}
            SEP => b = Some(Vec::new()),
            _ => {
                let w = vocab.token(id).unwrap_or(RESERVED[UNK]);
                match b.as_mut() {
                    Some(b) => b.push(w),
                    None => a.push(w),
                }
            }
        }
    }
    (a.join(" "), b.map(|b| b.join(" ")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// Label 1 iff positive markers outnumber negative markers.
    Keyword,
    /// Label 1 iff the two sentences share at least one content token.
    Pair,
}

impl core::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keyword" => Ok(Self::Keyword),
            "pair" | "pair-match" | "pair_match" => Ok(Self::Pair),
            other => Err(Error::config(format!("unknown synthetic task {other:?}"))),
        }
    }
}

pub const POSITIVE_MARKERS: [&str; 4] = ["good", "great", "superb", "lovely"];
pub const NEGATIVE_MARKERS: [&str; 4] = ["bad", "awful", "poor", "dull"];
const FILLERS: usize = 60;
const PAIR_CONTENT: usize = 12;
const PAIR_LEN: usize = 3;

/// Minimum shared content tokens for a positive pair.
pub const PAIR_MIN_SHARED: usize = 1;

pub fn keyword_label(text: &str) -> usize {
    let (mut pos, mut neg) = (0, 0);
    for w in text.split_whitespace() {
        if POSITIVE_MARKERS.contains(&w) {
            pos += 1;
        } else if NEGATIVE_MARKERS.contains(&w) {
            neg += 1;
        }
    }
    usize::from(pos > neg)
}

pub fn pair_label(a: &str, b: &str) -> usize {
    let left: Vec<&str> = a.split_whitespace().collect();
    let mut shared: Vec<&str> = b.split_whitespace().filter(|w| left.contains(w)).collect();
    shared.sort_unstable();
    shared.dedup();
    usize::from(shared.len() >= PAIR_MIN_SHARED)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthData {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

fn keyword_sentence(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(4..=12);
    let words: Vec<String> = (0..len)
        .map(|_| {
            let r: f64 = rng.gen();
            if r < 0.125 {
                POSITIVE_MARKERS[rng.gen_range(0..4)].to_string()
            } else if r < 0.25 {
                NEGATIVE_MARKERS[rng.gen_range(0..4)].to_string()
            } else {
                format!("w{:02}", rng.gen_range(0..FILLERS))
            }
        })
        .collect();
    words.join(" ")
}

fn pair_sentence(rng: &mut ChaCha8Rng) -> String {
    let mut pool: Vec<usize> = (0..PAIR_CONTENT).collect();
    pool.shuffle(rng);
    pool[..PAIR_LEN]
        .iter()
        .map(|i| format!("c{i:02}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn synth_example(kind: SynthKind, target: usize, rng: &mut ChaCha8Rng) -> Example {
    loop {
        let ex = match kind {
            SynthKind::Keyword => {
                let a = keyword_sentence(rng);
                let label = keyword_label(&a);
                Example {
                    text_a: a,
                    text_b: None,
                    label,
                }
            }
            SynthKind::Pair => {
                let a = pair_sentence(rng);
                let b = pair_sentence(rng);
                let label = pair_label(&a, &b);
                Example {
                    text_a: a,
                    text_b: Some(b),
                    label,
                }
            }
        };
        if ex.label == target {
            return ex;
        }
    }
}

/// Deterministic synthetic splits. Labels alternate before a final shuffle,
/// so each split is balanced to within one example.
pub fn synth_task(kind: SynthKind, n_train: usize, n_eval: usize, seed: u64) -> Result<SynthData> {
    if n_train == 0 || n_eval == 0 {
        return Err(Error::config("synthetic splits must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = |n: usize| {
        let mut v: Vec<Example> = (0..n).map(|i| synth_example(kind, i % 2, &mut rng)).collect();
        v.shuffle(&mut rng);
        v
    };
    let train = split(n_train);
    let eval = split(n_eval);
    Ok(SynthData { train, eval })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::from_tokens(["good", "movie", "bad"].iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn tokenize_single_and_pair() {
        let v = vocab();
        let e = tokenize(&Example::new("good movie", None, 1, 2).unwrap(), &v, 6);
        assert_eq!(e.ids, vec![CLS, 4, 5, PAD, PAD, PAD]);
        assert_eq!(e.mask, vec![true, true, true, false, false, false]);

        let e = tokenize(&Example::new("good", Some("bad zzz".into()), 0, 2).unwrap(), &v, 8);
        assert_eq!(e.ids[..5], [CLS, 4, SEP, 6, UNK]);
        assert_eq!(e.len(), 5);

        let e = tokenize(&Example::new("good", Some(String::new()), 0, 2).unwrap(), &v, 4);
        assert!(!e.ids.contains(&SEP));
    }

    #[test]
    fn truncation_is_exact() {
        let v = vocab();
        let ex = Example::new("good movie bad good movie bad good", None, 0, 2).unwrap();
        let e = tokenize(&ex, &v, 5);
        assert_eq!(e.ids.len(), 5);
        assert!(e.mask.iter().all(|&m| m));
    }

    #[test]
    fn detokenize_inverts_in_vocab_text() {
        let v = vocab();
        let ex = Example::new("good bad", Some("movie good".into()), 0, 2).unwrap();
        let e = tokenize(&ex, &v, 10);
        assert_eq!(
            detokenize(&v, &e.ids),
            ("good bad".to_string(), Some("movie good".to_string()))
        );
    }

    #[test]
    fn vocab_build_orders_by_frequency_then_name() {
        let exs = [
            Example::new("b a a c", None, 0, 2).unwrap(),
            Example::new("c b a d", None, 0, 2).unwrap(),
        ];
        let v = Vocab::build(&exs, 2, 100).unwrap();
        assert_eq!(v.tokens(), &["a", "b", "c"]);
        assert_eq!(v.id("d"), UNK);
        let capped = Vocab::build(&exs, 1, 6).unwrap();
        assert_eq!(capped.len(), 6);
    }

    #[test]
    fn vocab_rejects_duplicates_and_reserved() {
        assert!(Vocab::from_tokens(vec!["x".into(), "x".into()]).is_err());
        assert!(Vocab::from_tokens(vec!["[cls]".into()]).is_err());
    }

    #[test]
    fn example_validation() {
        assert!(Example::new("  ", None, 0, 2).is_err());
        assert!(Example::new("ok", None, 2, 2).is_err());
    }

    #[test]
    fn unknown_kind() {
        assert!("sentiment".parse::<SynthKind>().is_err());
        assert_eq!("pair".parse::<SynthKind>().unwrap(), SynthKind::Pair);
    }

    #[test]
    fn generators_are_deterministic_balanced_and_consistent() {
        for kind in [SynthKind::Keyword, SynthKind::Pair] {
            let a = synth_task(kind, 400, 100, 7).unwrap();
            let b = synth_task(kind, 400, 100, 7).unwrap();
            assert_eq!(a, b);
            let pos = a.train.iter().filter(|e| e.label == 1).count() as f64 / 400.0;
            assert!((0.45..=0.55).contains(&pos));
            for e in a.train.iter().chain(&a.eval) {
                let relabel = match kind {
                    SynthKind::Keyword => keyword_label(&e.text_a),
                    SynthKind::Pair => pair_label(&e.text_a, e.text_b.as_deref().unwrap()),
                };
                assert_eq!(relabel, e.label);
            }
        }
        assert_ne!(
            synth_task(SynthKind::Keyword, 50, 10, 1).unwrap(),
            synth_task(SynthKind::Keyword, 50, 10, 2).unwrap()
        );
    }
}
