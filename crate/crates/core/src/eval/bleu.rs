//! Corpus BLEU with 13a tokenization, exponential smoothing and a single
//! reference per line. Mixed case.

use std::collections::HashMap;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

static RULES: LazyLock<[(Regex, &'static str); 4]> = LazyLock::new(|| {
    [
        // ASCII symbols and punctuation other than period and comma
        (Regex::new(r"([\{-~\[-` -&\(-\+:-@/])").unwrap(), " $1 "),
        // period and comma unless preceded by a digit
        (Regex::new(r"([^0-9])([\.,])").unwrap(), "$1 $2 "),
        // ... or followed by one
        (Regex::new(r"([\.,])([^0-9])").unwrap(), " $1 $2"),
        // dash after a digit
        (Regex::new(r"([0-9])(-)").unwrap(), "$1 $2 "),
    ]
});

/// mteval-v13a tokenization.
pub fn tokenize_13a(line: &str) -> Vec<String> {
    let mut s = line.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if s.contains('&') {
        s = s.replace("&quot;", "\"").replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">");
    }
    let mut s = format!(" {s} ");
    for (re, rep) in RULES.iter() {
        s = re.replace_all(&s, *rep).into_owned();
    }
    s.split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    pub score: f64,
    /// Smoothed n-gram precisions in percent.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = &self.precisions;
        write!(
            f,
            "BLEU = {:.2} ({:.1}/{:.1}/{:.1}/{:.1}, BP={:.3}, hyp_len={}, ref_len={})",
            self.score, p[0], p[1], p[2], p[3], self.brevity_penalty, self.hyp_len, self.ref_len
        )
    }
}

impl BleuReport {
    pub const CSV_HEADER: &'static str = "bleu,p1,p2,p3,p4,bp,hyp_len,ref_len";

    pub fn csv_line(&self) -> String {
        let p = &self.precisions;
        format!(
            "{:.4},{:.4},{:.4},{:.4},{:.4},{:.6},{},{}",
            self.score, p[0], p[1], p[2], p[3], self.brevity_penalty, self.hyp_len, self.ref_len
        )
    }
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Corpus-level BLEU of `hyps` against one reference line each.
pub fn bleu_corpus<S: AsRef<str>, R: AsRef<str>>(hyps: &[S], refs: &[R]) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!("{} hypothesis lines but {} reference lines", hyps.len(), refs.len())));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let h = tokenize_13a(h.as_ref());
        let r = tokenize_13a(r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngrams(&r, n);
            for (g, c) in ngrams(&h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    Ok(score_from_counts(matches, totals, hyp_len, ref_len))
}

/// BLEU from sufficient statistics. An order with no candidate n-grams has
/// precision 0 and zeroes the score; an order with candidates but no matches
/// gets `1 / (2^k · total)` where `k` counts such orders so far.
pub fn score_from_counts(
    matches: [usize; MAX_ORDER],
    totals: [usize; MAX_ORDER],
    hyp_len: usize,
    ref_len: usize,
) -> BleuReport {
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let mut precisions = [0.0; MAX_ORDER];
    let mut smooth = 1.0;
    for n in 0..MAX_ORDER {
        if totals[n] == 0 {
            break;
        }
        precisions[n] = if matches[n] == 0 {
            smooth *= 2.0;
            100.0 / (smooth * totals[n] as f64)
        } else {
            100.0 * matches[n] as f64 / totals[n] as f64
        };
    }
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        let mean = precisions.iter().map(|p| (p / 100.0).ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * mean.exp()
    };
    BleuReport { score, precisions, brevity_penalty, hyp_len, ref_len, matches, totals }
}
