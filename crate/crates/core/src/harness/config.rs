//! Line-oriented `section.key = value` settings.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known; a key may appear once per file. Command-line overrides replace file
//! values. Relative paths in a file resolve against the file's directory,
//! relative paths given on the command line against the working directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Every accepted key with a one-line description, grouped by section.
pub const KEYS: &[(&str, &str)] = &[
    ("run.out_dir", "run directory for artifacts"),
    ("data.train", "training corpus prefix (<prefix>.src / <prefix>.tgt)"),
    ("data.valid", "validation corpus prefix"),
    ("data.test", "test corpus prefix, decoded and scored after training"),
    ("data.vocab", "existing vocabulary file; learned from data.train when absent"),
    ("data.num_merges", "BPE merge operations"),
    ("data.max_len", "drop pairs with more subword tokens than this on either side"),
    ("model.preset", "single|dual|triple|quadruple|quintuple, optionally ,small|,large"),
    ("model.d_model", "hidden size"),
    ("model.heads", "attention heads"),
    ("model.d_ff", "feed-forward inner size"),
    ("model.decoder_layers", "decoder depth"),
    ("model.encoders", "comma-separated branch kinds (B,L,C,S,F or names)"),
    ("model.branch_layers", "one depth for all branches or one per branch"),
    ("model.kernel_width", "ConvS2S kernel width"),
    ("model.expansion_coeffs", "static expansion coefficients, cycled per layer"),
    ("model.vocab_size", "vocabulary size (runs take it from the vocabulary)"),
    ("model.max_len", "longest sequence the model accepts"),
    ("model.dropout", "dropout probability"),
    ("model.combine", "sum|concat"),
    ("train.beta1", "Adam beta1"),
    ("train.beta2", "Adam beta2"),
    ("train.adam_eps", "Adam epsilon"),
    ("train.warmup", "Noam warm-up steps"),
    ("train.label_smoothing", "label smoothing gamma"),
    ("train.token_budget", "padded target tokens per batch"),
    ("train.max_epochs", "training epochs"),
    ("train.seed", "seed for initialisation, batching and dropout"),
    ("train.lr_scale", "multiplier on the Noam rate"),
    ("eval.beam", "beam size"),
    ("translate.input", "source sentences to translate"),
    ("translate.output", "where to write translations (stdout when absent)"),
    ("translate.checkpoint", "checkpoint to load (default <out_dir>/model.ckpt)"),
    ("translate.vocab", "vocabulary to load (default <out_dir>/vocab.bpe)"),
    ("score.hyp", "hypothesis file"),
    ("score.ref", "reference file"),
    ("score.out", "optional CSV output"),
    ("synergy.table", "score table CSV kind,i,j,bleu"),
    ("synergy.matrix", "optional synergy matrix CSV i,j,s used for pair selection"),
    ("synergy.k", "number of pairs to select"),
    ("synergy.out", "optional CSV output of the matrix"),
    ("cost.presets", "comma-separated preset names"),
    ("cost.scales", "comma-separated scales: small,large"),
    ("cost.out", "optional CSV output"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
struct Entry {
    value: String,
    /// 1-based line in the file, 0 for command-line overrides.
    line: usize,
    base: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Settings {
    entries: BTreeMap<String, Entry>,
}

fn check_key(key: &str, line: usize) -> Result<()> {
    if KEYS.iter().any(|(k, _)| *k == key) {
        Ok(())
    } else {
        Err(Error::ConfigKey { line, key: key.to_string(), msg: "unknown key".into() })
    }
}

fn split(s: &str, line: usize) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::ConfigKey {
        line,
        key: s.trim().to_string(),
        msg: "expected `section.key = value`".into(),
    })?;
    let k = k.trim().to_string();
    check_key(&k, line)?;
    Ok((k, v.trim().to_string()))
}

impl Settings {
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut s = Settings::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = split(line, i + 1)?;
            if let Some(prev) = s.entries.get(&k) {
                return Err(Error::ConfigKey {
                    line: i + 1,
                    key: k,
                    msg: format!("already set on line {}", prev.line),
                });
            }
            s.entries.insert(k, Entry { value: v, line: i + 1, base: base.map(Path::to_path_buf) });
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Settings::parse(&text, Some(path.parent().unwrap_or(Path::new(""))))
    }

    /// Applies a `section.key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = split(assignment, 0)?;
        self.entries.insert(k, Entry { value: v, line: 0, base: None });
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    pub fn error(&self, key: &str, msg: impl Into<String>) -> Error {
        Error::ConfigKey { line: self.entries.get(key).map_or(0, |e| e.line), key: key.to_string(), msg: msg.into() }
    }

    /// Parsed value of `key`, if set.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| self.error(key, format!("cannot parse {v:?}: {e}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.raw(key) else { return Ok(None) };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| self.error(key, format!("cannot parse {s:?}: {e}"))))
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Path value, resolved against the directory of the file that set it.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let e = self.entries.get(key)?;
        let p = PathBuf::from(&e.value);
        Some(match &e.base {
            Some(b) if p.is_relative() => b.join(p),
            _ => p,
        })
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key).ok_or_else(|| self.error(key, "required setting is missing"))
    }

    /// Keys and values in key order, for echoing.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), e.value.as_str()))
    }
}
