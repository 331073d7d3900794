//! Decoding and scoring.

pub mod bleu;

use std::cmp::Ordering;

use crate::data::{Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{Ids, Model};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor};

pub use bleu::{bleu_corpus, tokenize_13a, BleuReport};

/// Next-token log-probabilities for a batch of prefixes of equal length, each
/// starting with BOS.
pub trait Scorer {
    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// BOS-rooted token ids.
    pub ids: Vec<usize>,
    pub logprob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens without BOS and the closing EOS.
    pub fn tokens(&self) -> &[usize] {
        let end = if self.finished { self.ids.len() - 1 } else { self.ids.len() };
        &self.ids[1..end]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamOutput {
    pub best: Hypothesis,
    /// Set when no hypothesis emitted EOS within `max_len` tokens; `best` is
    /// then the highest scoring unfinished prefix.
    pub unfinished: bool,
}

/// Higher score first; equal scores go to the smaller id sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.logprob.partial_cmp(&a.logprob).unwrap_or(Ordering::Equal).then_with(|| a.ids.cmp(&b.ids))
}

/// Beam search over at most `max_len` generated tokens, scored by raw
/// log-probability. Each step expands every live prefix, retires EOS
/// extensions that rank within the top `beam` to the finished pool and keeps
/// the best `beam` unfinished ones. Search ends once no live prefix can beat
/// the best finished hypothesis.
pub fn beam_search(scorer: &dyn Scorer, beam: usize, max_len: usize) -> Result<BeamOutput> {
    if beam == 0 {
        return Err(Error::Contract("beam size must be at least 1".into()));
    }
    let mut live = vec![Hypothesis { ids: vec![BOS], logprob: 0.0, finished: false }];
    let mut pool: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let prefixes: Vec<Vec<usize>> = live.iter().map(|h| h.ids.clone()).collect();
        let scores = scorer.next_log_probs(&prefixes)?;
        let mut cand = Vec::new();
        for (h, lp) in live.iter().zip(&scores) {
            for (tok, &s) in lp.iter().enumerate() {
                if s.is_finite() {
                    let mut ids = h.ids.clone();
                    ids.push(tok);
                    cand.push(Hypothesis { ids, logprob: h.logprob + s, finished: tok == EOS });
                }
            }
        }
        cand.sort_by(rank);
        live.clear();
        for (r, c) in cand.into_iter().enumerate() {
            if c.finished {
                if r < beam {
                    pool.push(c);
                }
            } else if live.len() < beam {
                live.push(c);
            }
            if live.len() == beam && r >= beam {
                break;
            }
        }
        pool.sort_by(rank);
        let done = match (pool.first(), live.first()) {
            (_, None) => true,
            (Some(f), Some(l)) => l.logprob < f.logprob,
            (None, Some(_)) => false,
        };
        if done {
            break;
        }
    }
    match pool.into_iter().next() {
        Some(best) => Ok(BeamOutput { best, unfinished: false }),
        None => {
            let best =
                live.into_iter().next().ok_or_else(|| Error::Contract("beam search found no continuation".into()))?;
            Ok(BeamOutput { best, unfinished: true })
        }
    }
}

/// Argmax decoding, ties to the smaller token id.
pub fn greedy(scorer: &dyn Scorer, max_len: usize) -> Result<BeamOutput> {
    let mut h = Hypothesis { ids: vec![BOS], logprob: 0.0, finished: false };
    for _ in 0..max_len {
        let lp = scorer.next_log_probs(std::slice::from_ref(&h.ids))?.remove(0);
        let (tok, s) = lp
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_finite())
            .fold(None, |best: Option<(usize, f64)>, (t, &s)| match best {
                Some((_, bs)) if bs >= s => best,
                _ => Some((t, s)),
            })
            .ok_or_else(|| Error::Contract("greedy decoding found no continuation".into()))?;
        h.ids.push(tok);
        h.logprob += s;
        if tok == EOS {
            h.finished = true;
            return Ok(BeamOutput { best: h, unfinished: false });
        }
    }
    Ok(BeamOutput { best: h, unfinished: true })
}

/// Scores continuations of one encoded source sentence with the model.
/// PAD and BOS are never proposed.
pub struct ModelScorer<'a, T: Scalar> {
    model: &'a Model,
    store: &'a ParamStore<T>,
    memory: Tensor<T>,
    src_len: usize,
}

impl<'a, T: Scalar> ModelScorer<'a, T> {
    pub fn new(model: &'a Model, store: &'a ParamStore<T>, src: &[usize]) -> Result<Self> {
        if src.is_empty() {
            return Err(Error::Data("empty source sentence".into()));
        }
        let g = Graph::new();
        let ctx = Ctx::eval(&g, store);
        let lengths = [src.len()];
        let m = model.encode(&ctx, Ids { ids: src, rows: 1, len: src.len(), lengths: &lengths })?;
        let memory = Tensor::new(g.shape(m), g.data(m))?;
        Ok(ModelScorer { model, store, memory, src_len: src.len() })
    }
}

impl<T: Scalar> Scorer for ModelScorer<'_, T> {
    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let rows = prefixes.len();
        let len = prefixes.first().map_or(0, Vec::len);
        if prefixes.iter().any(|p| p.len() != len) || len == 0 {
            return Err(Error::Contract("prefixes must be non-empty and of equal length".into()));
        }
        let g = Graph::new();
        let ctx = Ctx::eval(&g, self.store);
        let mut shape = self.memory.shape.clone();
        shape[0] = rows;
        let data = self.memory.data.repeat(rows);
        let memory = g.constant(Tensor::new(shape, data)?);
        let ids: Vec<usize> = prefixes.concat();
        let lengths = vec![len; rows];
        let src_lengths = vec![self.src_len; rows];
        let logits = self.model.decode(&ctx, Ids { ids: &ids, rows, len, lengths: &lengths }, memory, &src_lengths)?;
        let v = self.model.cfg.vocab_size;
        let data = g.data(logits);
        Ok((0..rows)
            .map(|r| {
                let row: Vec<f64> = data[(r * len + len - 1) * v..(r * len + len) * v]
                    .iter()
                    .map(|x| x.to_f64().unwrap_or(f64::NAN))
                    .collect();
                let mut lp = log_softmax(&row);
                lp[PAD] = f64::NEG_INFINITY;
                lp[BOS] = f64::NEG_INFINITY;
                lp
            })
            .collect())
    }
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Token-id translation of one source id sequence (EOS-terminated).
pub fn translate_ids<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    src: &[usize],
    beam: usize,
) -> Result<BeamOutput> {
    let scorer = ModelScorer::new(model, store, src)?;
    let max_len = (2 * src.len() + 10).min(model.cfg.max_len);
    beam_search(&scorer, beam, max_len)
}

/// Translates plain-text sentences, returning detokenized output lines and
/// the number of sentences that hit the length limit without EOS.
pub fn translate<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    vocab: &Vocabulary,
    sentences: &[String],
    beam: usize,
) -> Result<(Vec<String>, usize)> {
    let mut out = Vec::with_capacity(sentences.len());
    let mut unfinished = 0;
    for s in sentences {
        let mut src = vocab.encode(s);
        src.truncate(model.cfg.max_len - 1);
        src.push(EOS);
        let r = translate_ids(model, store, &src, beam)?;
        unfinished += r.unfinished as usize;
        out.push(vocab.decode(r.best.tokens()));
    }
    Ok((out, unfinished))
}
