//! Single/dual score tables and the pairwise synergy analysis.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::encoders::EncoderKind;
use crate::error::{Error, Result};

/// BLEU of single-branch models and of dual-branch models. Dual entries are
/// unordered; a pair of the same kind is the twin configuration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreTable {
    pub single: BTreeMap<EncoderKind, f64>,
    pub dual: BTreeMap<(EncoderKind, EncoderKind), f64>,
}

fn key(a: EncoderKind, b: EncoderKind) -> (EncoderKind, EncoderKind) {
    (a.min(b), a.max(b))
}

fn check_bleu(v: f64, line: usize) -> Result<f64> {
    if (0.0..=100.0).contains(&v) {
        Ok(v)
    } else {
        Err(Error::Data(format!("line {line}: BLEU {v} outside [0, 100]")))
    }
}

impl ScoreTable {
    pub fn dual(&self, i: EncoderKind, j: EncoderKind) -> Option<f64> {
        self.dual.get(&key(i, j)).copied()
    }

    pub fn set_dual(&mut self, i: EncoderKind, j: EncoderKind, bleu: f64) {
        self.dual.insert(key(i, j), bleu);
    }

    /// Parses CSV rows `kind,i,j,bleu` where kind is `single` (j empty) or
    /// `dual`. A header row starting with `kind` is skipped.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut t = ScoreTable::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || (n == 0 && line.starts_with("kind")) {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(Error::Data(format!("line {}: expected kind,i,j,bleu", n + 1)));
            }
            let kind_of = |s: &str| s.parse::<EncoderKind>().map_err(|e| Error::Data(format!("line {}: {e}", n + 1)));
            let bleu = f[3].parse::<f64>().map_err(|_| Error::Data(format!("line {}: bad BLEU {:?}", n + 1, f[3])))?;
            let bleu = check_bleu(bleu, n + 1)?;
            match f[0] {
                "single" => {
                    t.single.insert(kind_of(f[1])?, bleu);
                }
                "dual" => t.set_dual(kind_of(f[1])?, kind_of(f[2])?, bleu),
                other => return Err(Error::Data(format!("line {}: unknown row kind {other:?}", n + 1))),
            }
        }
        Ok(t)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,i,j,bleu\n");
        for (k, v) in &self.single {
            let _ = writeln!(s, "single,{},,{v}", k.letter());
        }
        for ((a, b), v) in &self.dual {
            let _ = writeln!(s, "dual,{},{},{v}", a.letter(), b.letter());
        }
        s
    }
}

fn idx(k: EncoderKind) -> usize {
    EncoderKind::ALL.iter().position(|&x| x == k).unwrap()
}

/// `s[i][j]`: gain of the dual `i+j` over the single model `j`, indexed in
/// B, L, C, S, F order. Entries without data are `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynergyMatrix {
    pub s: [[Option<f64>; 5]; 5],
}

impl SynergyMatrix {
    pub fn get(&self, i: EncoderKind, j: EncoderKind) -> Option<f64> {
        self.s[idx(i)][idx(j)]
    }

    pub fn set(&mut self, i: EncoderKind, j: EncoderKind, v: f64) {
        self.s[idx(i)][idx(j)] = Some(v);
    }

    /// Rows `i,j,s` with letter codes; a header starting with `i` is skipped.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut m = SynergyMatrix::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || (n == 0 && line.starts_with('i')) {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let parsed = (f.len() == 3)
                .then(|| Some((f[0].parse().ok()?, f[1].parse().ok()?, f[2].parse::<f64>().ok()?)))
                .flatten();
            let (i, j, v) = parsed.ok_or_else(|| Error::Data(format!("line {}: expected i,j,s", n + 1)))?;
            m.set(i, j, v);
        }
        Ok(m)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("i,j,s\n");
        for i in EncoderKind::ALL {
            for j in EncoderKind::ALL {
                if let Some(v) = self.get(i, j) {
                    let _ = writeln!(s, "{},{},{v:.6}", i.letter(), j.letter());
                }
            }
        }
        s
    }

    /// Signed two-decimal grid; absent entries print as `n/a`.
    pub fn to_table(&self) -> String {
        let mut s = String::from("     ");
        for j in EncoderKind::ALL {
            let _ = write!(s, "{:>7}", j.letter());
        }
        s.push('\n');
        for i in EncoderKind::ALL {
            let _ = write!(s, "{:<5}", i.letter());
            for j in EncoderKind::ALL {
                match self.get(i, j) {
                    Some(v) => {
                        let _ = write!(s, "{v:>+7.2}");
                    }
                    None => {
                        let _ = write!(s, "{:>7}", "n/a");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

/// `s[i][j] = dual(i, j) − single(j)`; the diagonal uses the twin duals.
pub fn synergy_matrix(table: &ScoreTable) -> Result<SynergyMatrix> {
    let missing: Vec<char> =
        EncoderKind::ALL.iter().filter(|k| !table.single.contains_key(k)).map(|k| k.letter()).collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("score table lacks single scores for {missing:?}")));
    }
    let mut m = SynergyMatrix::default();
    for i in EncoderKind::ALL {
        for j in EncoderKind::ALL {
            if let Some(d) = table.dual(i, j) {
                m.set(i, j, d - table.single[&j]);
            }
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedPair {
    pub pair: (EncoderKind, EncoderKind),
    pub sum: f64,
}

impl RankedPair {
    pub fn label(&self) -> String {
        format!("{}+{}", self.pair.0.letter(), self.pair.1.letter())
    }
}

/// Unordered pairs `{i, j}`, `i ≠ j`, ranked by `s[i][j] + s[j][i]`
/// descending. Pairs with an absent entry are skipped. Ties go to the
/// lexicographically smaller letter pair. Each pair is reported in
/// B, L, C, S, F order.
pub fn select_top_pairs(m: &SynergyMatrix, k: usize) -> Vec<RankedPair> {
    let mut pairs = Vec::new();
    for (a, &i) in EncoderKind::ALL.iter().enumerate() {
        for &j in &EncoderKind::ALL[a + 1..] {
            if let (Some(x), Some(y)) = (m.get(i, j), m.get(j, i)) {
                pairs.push(RankedPair { pair: (i, j), sum: x + y });
            }
        }
    }
    let letters = |p: &RankedPair| {
        let (a, b) = (p.pair.0.letter(), p.pair.1.letter());
        (a.min(b), a.max(b))
    };
    pairs.sort_by(|a, b| b.sum.total_cmp(&a.sum).then_with(|| letters(a).cmp(&letters(b))));
    pairs.truncate(k);
    pairs
}
