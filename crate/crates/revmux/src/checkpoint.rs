//! The `RVMX` container: little-endian, magic, `u32` version, `u32` entry
//! count, then per entry a `u32`-length UTF-8 name, a `u8` dtype tag, a
//! `u32` rank, `u64` extents and the raw row-major payload.
//!
//! Tag 0 holds `f32` tensors. Tag 1 holds UTF-8 JSON (rank 1, extent =
//! byte length) and carries configs and the vocabulary.

use std::collections::BTreeSet;
use std::path::Path;

use revmux_core::adapters::{AdapterConfig, RevMuxAdapters};
use revmux_core::backbone::{EncoderConfig, EncoderModel, Parameterized};
use revmux_core::data::Vocab;
use revmux_core::numerics::{Param, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::atomic::write_atomic;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RVMX";
pub const VERSION: u32 = 1;

const TAG_F32: u8 = 0;
const TAG_JSON: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Tensor<f32>),
    Json(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub payload: Payload,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn push_tensor(&mut self, name: &str, t: Tensor<f32>) {
        self.entries.push(Entry {
            name: name.to_string(),
            payload: Payload::F32(t),
        });
    }

    pub fn push_json<T: Serialize>(&mut self, name: &str, value: &T) {
        let text = serde_json::to_string(value).expect("config values serialize");
        self.entries.push(Entry {
            name: name.to_string(),
            payload: Payload::Json(text),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Payload> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.payload)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            match &e.payload {
                Payload::F32(t) => {
                    out.push(TAG_F32);
                    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                    for &x in t.shape() {
                        out.extend_from_slice(&(x as u64).to_le_bytes());
                    }
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Payload::Json(s) => {
                    out.push(TAG_JSON);
                    out.extend_from_slice(&1u32.to_le_bytes());
                    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("not an RVMX container (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported RVMX version {version} (expected {VERSION})"));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| "entry name is not UTF-8".to_string())?
                .to_string();
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| "extent overflows usize".to_string())?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &b| a.checked_mul(b))
                .ok_or_else(|| format!("entry {name}: extents overflow"))?;
            let payload = match tag {
                TAG_F32 => {
                    let raw = r.take(numel.checked_mul(4).ok_or("payload size overflow")?)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    Payload::F32(Tensor::new(shape, data).map_err(|e| e.to_string())?)
                }
                TAG_JSON if rank == 1 => {
                    let raw = r.take(numel)?;
                    Payload::Json(
                        String::from_utf8(raw.to_vec()).map_err(|_| format!("entry {name}: metadata is not UTF-8"))?,
                    )
                }
                other => return Err(format!("entry {name}: unknown dtype tag {other}")),
            };
            entries.push(Entry { name, payload });
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes after the last entry", bytes.len() - r.pos));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        write_atomic(path, |w| w.write_all(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| Error::format(path, m))
    }

    fn json<T: DeserializeOwned>(&self, path: &Path, name: &str) -> Result<T> {
        match self.get(name) {
            Some(Payload::Json(s)) => {
                serde_json::from_str(s).map_err(|e| Error::format(path, format!("entry {name}: {e}")))
            }
            Some(_) => Err(Error::format(path, format!("entry {name} is not metadata"))),
            None => Err(Error::format(path, format!("missing entry {name}"))),
        }
    }

    /// Copies every tensor named in `params` into place. Missing, extra or
    /// misshapen tensors under `prefix` are errors.
    fn fill(&self, path: &Path, prefix: &str, meta: &[&str], params: Vec<&mut Param<f32>>) -> Result<()> {
        let mut expected = BTreeSet::new();
        for p in params {
            let name = p.name().to_string();
            match self.get(&name) {
                Some(Payload::F32(t)) if t.shape() == p.value.shape() => p.value = t.clone(),
                Some(Payload::F32(t)) => {
                    return Err(Error::format(
                        path,
                        format!("{name}: shape {:?}, model expects {:?}", t.shape(), p.value.shape()),
                    ))
                }
                _ => return Err(Error::format(path, format!("missing tensor {name}"))),
            }
            expected.insert(name);
        }
        for e in &self.entries {
            if e.name.starts_with(prefix) && !expected.contains(&e.name) && !meta.contains(&e.name.as_str()) {
                return Err(Error::format(path, format!("unexpected entry {}", e.name)));
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(format!("truncated at byte {}", self.pos));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }
}

const META_CONFIG: &str = "meta.encoder";
const META_VOCAB: &str = "meta.vocab";
const ADAPTER_CONFIG: &str = "adapter.meta.config";
const ADAPTER_RUN: &str = "adapter.meta.run";

/// A trained encoder together with the vocabulary it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub model: EncoderModel<f32>,
    pub vocab: Vocab,
}

impl Backbone {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.push_json(META_CONFIG, self.model.config());
        ck.push_json(META_VOCAB, &self.vocab.tokens());
        for p in self.model.params() {
            ck.push_tensor(p.name(), p.value.clone());
        }
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let config: EncoderConfig = ck.json(path, META_CONFIG)?;
        let tokens: Vec<String> = ck.json(path, META_VOCAB)?;
        let vocab = Vocab::from_tokens(tokens).map_err(|e| Error::format(path, e.to_string()))?;
        let mut model = EncoderModel::new(config, 0).map_err(|e| Error::format(path, e.to_string()))?;
        ck.fill(path, "", &[META_CONFIG, META_VOCAB], model.params_mut())?;
        if ck.entries.iter().any(|e| e.name.starts_with("adapter.")) {
            return Err(Error::format(
                path,
                "adapter checkpoint given where a backbone was expected",
            ));
        }
        Ok(Self { model, vocab })
    }
}

/// Settings the adapters were trained under; evaluation needs `l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterRun {
    pub l: usize,
    pub lambda: f64,
    pub mode: revmux_core::adapters::TrainMode,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBundle {
    pub adapters: RevMuxAdapters<f32>,
    pub run: AdapterRun,
}

impl AdapterBundle {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.push_json(ADAPTER_CONFIG, self.adapters.config());
        ck.push_json(ADAPTER_RUN, &self.run);
        for p in self.adapters.params() {
            ck.push_tensor(p.name(), p.value.clone());
        }
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let config: AdapterConfig = ck.json(path, ADAPTER_CONFIG)?;
        let run: AdapterRun = ck.json(path, ADAPTER_RUN)?;
        let mut adapters = RevMuxAdapters::new(config, 0).map_err(|e| Error::format(path, e.to_string()))?;
        ck.fill(path, "adapter.", &[ADAPTER_CONFIG, ADAPTER_RUN], adapters.params_mut())?;
        if let Some(e) = ck.entries.iter().find(|e| !e.name.starts_with("adapter.")) {
            return Err(Error::format(
                path,
                format!("unexpected entry {} in adapter checkpoint", e.name),
            ));
        }
        Ok(Self { adapters, run })
    }
}
