//! Byte-pair encoding over a shared source/target vocabulary.
//!
//! Words are split into characters followed by a separate end-of-word symbol
//! `</w>`. Learning repeatedly merges the most frequent adjacent pair; ties go
//! to the lexicographically smallest `(first, second)`. Surface tokens drop
//! the end marker and carry a trailing `@@` when the word continues.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const END: &str = "</w>";
pub const CONT: &str = "@@";

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

pub type Merge = (String, String);

fn symbols(word: &str) -> Vec<String> {
    let mut s: Vec<String> = word.chars().map(String::from).collect();
    s.push(END.to_string());
    s
}

/// Occurrences of each adjacent pair, counting a run of identical pairs
/// left to right without overlap (`a a a` holds one `(a, a)`).
pub(crate) fn pair_counts(words: &[(Vec<String>, usize)]) -> BTreeMap<(&str, &str), usize> {
    let mut counts = BTreeMap::new();
    for (syms, freq) in words {
        let mut prev_counted = false;
        for i in 0..syms.len().saturating_sub(1) {
            let overlaps = prev_counted && i > 0 && syms[i - 1] == syms[i] && syms[i] == syms[i + 1];
            if overlaps {
                prev_counted = false;
                continue;
            }
            *counts.entry((syms[i].as_str(), syms[i + 1].as_str())).or_insert(0) += freq;
            prev_counted = true;
        }
    }
    counts
}

fn apply_merge(syms: &[String], a: &str, b: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
            out.push(format!("{a}{b}"));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

/// Learns up to `num_merges` merges from a word-frequency table. Stops early
/// when no adjacent pair occurs at least twice.
pub fn learn(freqs: &BTreeMap<String, usize>, num_merges: usize) -> Result<Vec<Merge>> {
    if freqs.is_empty() || freqs.values().all(|&f| f == 0) {
        return Err(Error::Data("cannot learn BPE merges from an empty corpus".into()));
    }
    let mut words: Vec<(Vec<String>, usize)> = freqs.iter().map(|(w, &f)| (symbols(w), f)).collect();
    let mut merges = Vec::new();
    while merges.len() < num_merges {
        let best = {
            let counts = pair_counts(&words);
            // BTreeMap iteration is lexicographic, so the first maximum wins ties
            let mut best: Option<((&str, &str), usize)> = None;
            for (&pair, &c) in &counts {
                if best.is_none_or(|(_, bc)| c > bc) {
                    best = Some((pair, c));
                }
            }
            match best {
                Some(((a, b), c)) if c >= 2 => (a.to_string(), b.to_string()),
                _ => break,
            }
        };
        for (syms, _) in &mut words {
            if syms.len() > 1 {
                *syms = apply_merge(syms, &best.0, &best.1);
            }
        }
        merges.push(best);
    }
    Ok(merges)
}

/// The learned merge table plus the token/id maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub merges: Vec<Merge>,
    ranks: HashMap<Merge, usize>,
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Vocabulary whose tokens are the specials followed by `tokens` in order.
    pub fn new(merges: Vec<Merge>, tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let ranks = merges.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
        let mut v = Vocabulary { merges, ranks, tokens: Vec::new(), ids: HashMap::new() };
        for t in SPECIALS.iter().map(|s| s.to_string()).chain(tokens) {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Malformed(format!("invalid vocabulary token {t:?}")));
            }
            if v.ids.contains_key(&t) {
                return Err(Error::Malformed(format!("duplicate vocabulary token {t:?}")));
            }
            v.ids.insert(t.clone(), v.tokens.len());
            v.tokens.push(t);
        }
        Ok(v)
    }

    /// Learns merges from `sentences` and collects every surface token the
    /// merges produce on them, sorted for a stable id assignment.
    pub fn learn<'a>(sentences: impl IntoIterator<Item = &'a str> + Clone, num_merges: usize) -> Result<Self> {
        let mut freqs = BTreeMap::new();
        for s in sentences.clone() {
            for w in s.split_whitespace() {
                *freqs.entry(w.to_string()).or_insert(0) += 1;
            }
        }
        let merges = learn(&freqs, num_merges)?;
        let mut v = Vocabulary::new(merges, std::iter::empty())?;
        let mut seen = BTreeSet::new();
        for w in freqs.keys() {
            seen.extend(v.segment(w));
        }
        for t in seen {
            v.ids.insert(t.clone(), v.tokens.len());
            v.tokens.push(t);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    /// Surface tokens of one word, applying merges by learned priority.
    pub fn segment(&self, word: &str) -> Vec<String> {
        let mut syms = symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w)))
                .min_by_key(|&(r, _)| r)
                .map(|(_, w)| (w[0].clone(), w[1].clone()));
            match best {
                Some((a, b)) => syms = apply_merge(&syms, &a, &b),
                None => break,
            }
        }
        if syms.last().is_some_and(|s| s == END) {
            syms.pop();
        }
        let n = syms.len();
        syms.into_iter()
            .enumerate()
            .map(|(i, s)| match s.strip_suffix(END) {
                Some(base) => base.to_string(),
                None if i + 1 == n => s,
                None => s + CONT,
            })
            .collect()
    }

    /// Space-separated surface tokens of a sentence.
    pub fn encode_tokens(&self, sentence: &str) -> Vec<String> {
        sentence.split_whitespace().flat_map(|w| self.segment(w)).collect()
    }

    /// Token ids of a sentence; tokens outside the vocabulary become UNK.
    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        self.encode_tokens(sentence).iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// Joins tokens back into words, dropping specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .filter(|&&i| i >= SPECIALS.len() || i == UNK)
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK]))
            .collect();
        join_tokens(&toks)
    }

    /// Text form: `bpe-v1 <n>`, the merges, `#tokens`, then `token<TAB>id`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "bpe-v1 {}", self.merges.len());
        for (a, b) in &self.merges {
            let _ = writeln!(s, "{a} {b}");
        }
        s.push_str("#tokens\n");
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{i}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Malformed("empty vocabulary file".into()))?;
        let n: usize = header
            .strip_prefix("bpe-v1 ")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::Malformed(format!("bad vocabulary header {header:?}")))?;
        let mut merges = Vec::with_capacity(n);
        for _ in 0..n {
            let line = lines.next().ok_or_else(|| Error::Malformed("vocabulary file ends inside merges".into()))?;
            let (a, b) = line
                .split_once(' ')
                .filter(|(a, b)| !a.is_empty() && !b.is_empty() && !b.contains(' '))
                .ok_or_else(|| Error::Malformed(format!("bad merge line {line:?}")))?;
            merges.push((a.to_string(), b.to_string()));
        }
        if lines.next() != Some("#tokens") {
            return Err(Error::Malformed("missing #tokens section".into()));
        }
        let mut tokens = Vec::new();
        for (expect, line) in lines.enumerate() {
            let (tok, id) =
                line.rsplit_once('\t').ok_or_else(|| Error::Malformed(format!("bad token line {line:?}")))?;
            if id.parse::<usize>().ok() != Some(expect) {
                return Err(Error::Malformed(format!("token {tok:?} has id {id}, expected {expect}")));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Malformed("vocabulary must start with the special tokens".into()));
        }
        Vocabulary::new(merges, tokens.into_iter().skip(SPECIALS.len()))
    }
}

/// Undoes the continuation convention: `lo@@ w@@ est` becomes `lowest`.
pub fn join_tokens(tokens: &[&str]) -> String {
    let mut out = String::new();
    let mut glued = true;
    for t in tokens {
        if !glued {
            out.push(' ');
        }
        match t.strip_suffix(CONT) {
            Some(base) => {
                out.push_str(base);
                glued = true;
            }
            None => {
                out.push_str(t);
                glued = false;
            }
        }
    }
    out
}

/// Removes continuation markers from a space-separated token line.
pub fn detokenize(line: &str) -> String {
    join_tokens(&line.split_whitespace().collect::<Vec<_>>())
}
