//! Parallel corpora, length filtering and token-budget batching.

pub mod bpe;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Ids;

pub use bpe::{Vocabulary, BOS, EOS, PAD, UNK};

/// Line-aligned source and target sentences.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl Corpus {
    pub fn new(src: Vec<String>, tgt: Vec<String>) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(Error::Data(format!(
                "parallel sides differ in length: {} source vs {} target lines",
                src.len(),
                tgt.len()
            )));
        }
        Ok(Corpus { src, tgt })
    }

    /// Reads `<prefix>.src` and `<prefix>.tgt`. Whitespace is normalised to
    /// single spaces; lines empty on either side are dropped.
    pub fn load(prefix: &Path) -> Result<Self> {
        let read = |ext: &str| -> Result<Vec<String>> {
            let mut p = prefix.as_os_str().to_owned();
            p.push(format!(".{ext}"));
            let p = Path::new(&p);
            let text = fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingFile(p.to_path_buf()),
                _ => Error::Io(e),
            })?;
            Ok(text.lines().map(normalize).collect())
        };
        let c = Corpus::new(read("src")?, read("tgt")?)?;
        let (src, tgt) = c.src.into_iter().zip(c.tgt).filter(|(s, t)| !s.is_empty() && !t.is_empty()).unzip();
        Ok(Corpus { src, tgt })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Both sides, for learning the shared vocabulary.
    pub fn sentences(&self) -> impl Iterator<Item = &str> + Clone {
        self.src.iter().chain(&self.tgt).map(String::as_str)
    }

    pub fn encode(&self, vocab: &Vocabulary) -> Vec<SentencePair> {
        self.src.iter().zip(&self.tgt).map(|(s, t)| SentencePair::new(vocab.encode(s), vocab.encode(t))).collect()
    }
}

pub fn normalize(line: &str) -> String {
    line.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `src` ends with EOS; `tgt` starts with BOS and ends with EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl SentencePair {
    pub fn new(src: Vec<usize>, tgt: Vec<usize>) -> Self {
        let mut s = src;
        s.push(EOS);
        let mut t = Vec::with_capacity(tgt.len() + 2);
        t.push(BOS);
        t.extend(tgt);
        t.push(EOS);
        SentencePair { src: s, tgt: t }
    }

    /// Subword counts without the special tokens.
    pub fn lengths(&self) -> (usize, usize) {
        (self.src.len() - 1, self.tgt.len() - 2)
    }
}

/// Keeps pairs whose both sides have at most `max_len` subword tokens.
pub fn filter_by_length(pairs: Vec<SentencePair>, max_len: usize) -> Vec<SentencePair> {
    pairs
        .into_iter()
        .filter(|p| {
            let (s, t) = p.lengths();
            s <= max_len && t <= max_len
        })
        .collect()
}

/// Padded id matrices for one optimizer step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Positions of the pairs in the input slice.
    pub indices: Vec<usize>,
    pub rows: usize,
    pub src: Vec<usize>,
    pub src_len: Vec<usize>,
    pub src_width: usize,
    /// Full target rows including BOS and EOS, `[rows, tgt_width]`.
    pub tgt: Vec<usize>,
    pub tgt_len: Vec<usize>,
    pub tgt_width: usize,
    /// Decoder inputs (target without its last column), targets (without
    /// BOS) and the shared per-row length of both.
    dec_in: Vec<usize>,
    dec_out: Vec<usize>,
    dec_len: Vec<usize>,
}

impl Batch {
    pub fn new(pairs: &[SentencePair], indices: Vec<usize>) -> Self {
        let rows = indices.len();
        let src_width = indices.iter().map(|&i| pairs[i].src.len()).max().unwrap_or(0);
        let tgt_width = indices.iter().map(|&i| pairs[i].tgt.len()).max().unwrap_or(0);
        let mut b = Batch {
            rows,
            src: Vec::with_capacity(rows * src_width),
            src_len: Vec::with_capacity(rows),
            src_width,
            tgt: Vec::with_capacity(rows * tgt_width),
            tgt_len: Vec::with_capacity(rows),
            tgt_width,
            dec_in: Vec::new(),
            dec_out: Vec::new(),
            dec_len: Vec::new(),
            indices,
        };
        for &i in &b.indices {
            let p = &pairs[i];
            b.src.extend(pad(&p.src, src_width));
            b.src_len.push(p.src.len());
            b.tgt.extend(pad(&p.tgt, tgt_width));
            b.tgt_len.push(p.tgt.len());
            let t = &p.tgt;
            b.dec_in.extend(pad(&t[..t.len() - 1], tgt_width - 1));
            b.dec_out.extend(pad(&t[1..], tgt_width - 1));
            b.dec_len.push(t.len() - 1);
        }
        b
    }

    /// Padded target tokens, the quantity bounded by the token budget.
    pub fn padded_target_tokens(&self) -> usize {
        self.rows * self.tgt_width
    }

    pub fn src_ids(&self) -> Ids<'_> {
        Ids { ids: &self.src, rows: self.rows, len: self.src_width, lengths: &self.src_len }
    }

    pub fn decoder_input(&self) -> Ids<'_> {
        Ids { ids: &self.dec_in, rows: self.rows, len: self.tgt_width - 1, lengths: &self.dec_len }
    }

    pub fn targets(&self) -> &[usize] {
        &self.dec_out
    }

    /// True on real source positions.
    pub fn src_pad_mask(&self) -> Vec<bool> {
        self.src_len.iter().flat_map(|&l| (0..self.src_width).map(move |p| p < l)).collect()
    }

    pub fn tgt_pad_mask(&self) -> Vec<bool> {
        self.tgt_len.iter().flat_map(|&l| (0..self.tgt_width).map(move |p| p < l)).collect()
    }
}

fn pad(seq: &[usize], width: usize) -> impl Iterator<Item = usize> + '_ {
    seq.iter().copied().chain(std::iter::repeat(PAD)).take(width)
}

/// One epoch of batches. Pairs are bucketed by target length, shuffled within
/// each bucket, and packed greedily while the padded target token count stays
/// within `budget`; the batch order is then shuffled.
pub fn make_batches(pairs: &[SentencePair], budget: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Batch>> {
    if pairs.is_empty() {
        return Err(Error::Data("no sentence pairs to batch".into()));
    }
    if let Some((index, p)) = pairs.iter().enumerate().find(|(_, p)| p.tgt.len() > budget) {
        return Err(Error::Oversize { index, tokens: p.tgt.len(), budget });
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| pairs[i].tgt.len());
    for bucket in order.chunk_by_mut(|&a, &b| pairs[a].tgt.len() == pairs[b].tgt.len()) {
        bucket.shuffle(rng);
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut width = 0;
    for i in order {
        let w = width.max(pairs[i].tgt.len());
        if !current.is_empty() && (current.len() + 1) * w > budget {
            groups.push(std::mem::take(&mut current));
            width = 0;
        }
        width = width.max(pairs[i].tgt.len());
        current.push(i);
    }
    groups.push(current);
    groups.shuffle(rng);
    Ok(groups.into_iter().map(|g| Batch::new(pairs, g)).collect())
}
