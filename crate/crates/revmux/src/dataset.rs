//! JSONL ingestion and vocabulary files.

use std::io::{BufRead, BufReader};
use std::path::Path;

use revmux_core::data::{Example, Vocab, RESERVED};
use serde::Deserialize;

use crate::atomic::write_atomic;
use crate::error::{Error, Result};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    text: Option<String>,
    text1: Option<String>,
    text2: Option<String>,
    label: i64,
}

/// One example per non-blank line: `{"text", "label"}` or
/// `{"text1", "text2", "label"}`. Labels must lie in `0..n_classes`.
pub fn load_jsonl(path: &Path, n_classes: usize) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Line {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let row: Line = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let (a, b) = match (row.text, row.text1, row.text2) {
            (Some(t), None, None) => (t, None),
            (None, Some(a), Some(b)) => (a, Some(b)),
            _ => return Err(err("expected either \"text\" or both \"text1\" and \"text2\"".into())),
        };
        let label = usize::try_from(row.label)
            .ok()
            .filter(|&l| l < n_classes)
            .ok_or_else(|| err(format!("unknown label {} (expected 0..{n_classes})", row.label)))?;
        out.push(Example::new(a, b, label, n_classes).map_err(|e| err(e.to_string()))?);
    }
    if out.is_empty() {
        return Err(Error::format(path, "no examples"));
    }
    Ok(out)
}

/// One token per line; line `i` (from 0) gets id `i + 4`.
pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tokens: Vec<String> = text.lines().map(str::to_string).collect();
    Vocab::from_tokens(tokens).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    debug_assert_eq!(vocab.len(), vocab.tokens().len() + RESERVED.len());
    write_atomic(path, |w| {
        for t in vocab.tokens() {
            writeln!(w, "{t}")?;
        }
        Ok(())
    })
}
