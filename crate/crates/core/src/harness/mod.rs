//! Experiment front-end: settings, presets, cost reports and end-to-end runs.

pub mod config;
pub mod synergy;

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{filter_by_length, Corpus, SentencePair, Vocabulary};
use crate::encoders::{EncoderKind, EncoderSpec};
use crate::error::{Error, Result};
use crate::eval::{bleu_corpus, translate, BleuReport};
use crate::model::{Combine, CostReport, Model, ModelConfig};
use crate::nn::ParamStore;
use crate::train::{
    load_checkpoint, metrics_csv, save_checkpoint, train_loop, Adam, Checkpoint, EpochMetrics, TrainConfig,
};

pub use config::Settings;
pub use synergy::{select_top_pairs, synergy_matrix, RankedPair, ScoreTable, SynergyMatrix};

/// Per-layer expansion coefficients of a 12-layer static expansion branch.
pub const EXPANSION_COEFFS: [usize; 12] = [6, 6, 12, 8, 12, 8, 6, 6, 12, 8, 12, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Small,
    Large,
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "small" => Ok(Scale::Small),
            "large" => Ok(Scale::Large),
            o => Err(Error::Config(format!("unknown scale `{o}` (small|large)"))),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Small => "small",
            Scale::Large => "large",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Single,
    Dual,
    Triple,
    Quadruple,
    Quintuple,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Single, Preset::Dual, Preset::Triple, Preset::Quadruple, Preset::Quintuple];

    /// Branch kinds in the order they are added.
    pub fn kinds(self) -> &'static [EncoderKind] {
        use EncoderKind::*;
        const ORDER: [EncoderKind; 5] = [SelfAttention, StaticExpansion, Lstm, ConvS2S, FNet];
        &ORDER[..self as usize + 1]
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "single" => Ok(Preset::Single),
            "dual" => Ok(Preset::Dual),
            "triple" => Ok(Preset::Triple),
            "quadruple" => Ok(Preset::Quadruple),
            "quintuple" => Ok(Preset::Quintuple),
            o => Err(Error::Config(format!("unknown preset `{o}`"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Single => "single",
            Preset::Dual => "dual",
            Preset::Triple => "triple",
            Preset::Quadruple => "quadruple",
            Preset::Quintuple => "quintuple",
        })
    }
}

/// `"dual"` or `"dual,small"`; the scale defaults to large.
pub fn parse_preset(s: &str) -> Result<(Preset, Scale)> {
    match s.split_once(',') {
        Some((p, sc)) => Ok((p.parse()?, sc.parse()?)),
        None => Ok((s.parse()?, Scale::Large)),
    }
}

fn branch_layers(kind: EncoderKind, base: usize, scale: Scale) -> usize {
    match (kind, scale) {
        (EncoderKind::SelfAttention, _) => base,
        (_, Scale::Small) => 6,
        (EncoderKind::StaticExpansion, Scale::Large) => 12,
        (EncoderKind::Lstm, Scale::Large) => 18,
        (_, Scale::Large) => 6,
    }
}

fn spec(kind: EncoderKind, layers: usize, kernel_width: usize, coeffs: &[usize]) -> EncoderSpec {
    let mut s = match kind {
        EncoderKind::StaticExpansion => EncoderSpec::static_expansion(layers, coeffs),
        k => EncoderSpec::new(k, layers),
    };
    s.kernel_width = kernel_width;
    s
}

/// Model configuration of a named composition at the given scale.
pub fn build_model_from_preset(preset: Preset, scale: Scale) -> ModelConfig {
    let (n, vocab) = match scale {
        Scale::Small => (3, 4139),
        Scale::Large => (6, 4384),
    };
    let encoders = preset.kinds().iter().map(|&k| spec(k, branch_layers(k, n, scale), 3, &EXPANSION_COEFFS)).collect();
    ModelConfig { decoder_layers: n, encoders, vocab_size: vocab, ..ModelConfig::default() }
}

/// Model configuration from `model.*` settings: the preset (if any) first,
/// then individual keys.
pub fn model_config(s: &Settings) -> Result<ModelConfig> {
    let mut cfg = match s.raw("model.preset") {
        Some(p) => {
            let (p, sc) = parse_preset(p).map_err(|e| s.error("model.preset", e.to_string()))?;
            build_model_from_preset(p, sc)
        }
        None => ModelConfig::default(),
    };
    if let Some(v) = s.get("model.d_model")? {
        cfg.d_model = v;
    }
    if let Some(v) = s.get("model.heads")? {
        cfg.heads = v;
    }
    if let Some(v) = s.get("model.d_ff")? {
        cfg.d_ff = v;
    }
    if let Some(v) = s.get("model.decoder_layers")? {
        cfg.decoder_layers = v;
    }
    if let Some(v) = s.get("model.vocab_size")? {
        cfg.vocab_size = v;
    }
    if let Some(v) = s.get("model.max_len")? {
        cfg.max_len = v;
    }
    if let Some(v) = s.get("model.dropout")? {
        cfg.dropout = v;
    }
    if let Some(v) = s.raw("model.combine") {
        cfg.combine = match v {
            "sum" => Combine::Sum,
            "concat" => Combine::Concat,
            o => return Err(s.error("model.combine", format!("expected sum or concat, got {o:?}"))),
        };
    }
    let kinds: Vec<EncoderKind> = match s.list::<EncoderKind>("model.encoders")? {
        Some(k) if k.is_empty() => return Err(s.error("model.encoders", "no encoder kinds given")),
        Some(k) => k,
        None => cfg.encoders.iter().map(|e| e.kind).collect(),
    };
    let layers: Vec<usize> = match s.list::<usize>("model.branch_layers")? {
        Some(l) if l.len() == 1 => vec![l[0]; kinds.len()],
        Some(l) if l.len() == kinds.len() => l,
        Some(l) => {
            return Err(s.error("model.branch_layers", format!("{} depths for {} branches", l.len(), kinds.len())))
        }
        None if s.contains("model.encoders") => vec![6; kinds.len()],
        None => cfg.encoders.iter().map(|e| e.layers).collect(),
    };
    let kernel = s.get_or("model.kernel_width", 3)?;
    let coeffs = s.list::<usize>("model.expansion_coeffs")?.unwrap_or_else(|| EXPANSION_COEFFS.to_vec());
    if coeffs.is_empty() || coeffs.contains(&0) {
        return Err(s.error("model.expansion_coeffs", "coefficients must be a non-empty list of positive integers"));
    }
    cfg.encoders = kinds.iter().zip(&layers).map(|(&k, &l)| spec(k, l, kernel, &coeffs)).collect();
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_config(s: &Settings) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        beta1: s.get_or("train.beta1", d.beta1)?,
        beta2: s.get_or("train.beta2", d.beta2)?,
        adam_eps: s.get_or("train.adam_eps", d.adam_eps)?,
        warmup: s.get_or("train.warmup", d.warmup)?,
        label_smoothing: s.get_or("train.label_smoothing", d.label_smoothing)?,
        token_budget: s.get_or("train.token_budget", d.token_budget)?,
        max_epochs: s.get_or("train.max_epochs", d.max_epochs)?,
        seed: s.get_or("train.seed", d.seed)?,
        lr_scale: s.get_or("train.lr_scale", d.lr_scale)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub num_merges: usize,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub beam: usize,
}

impl RunConfig {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let model = model_config(s)?;
        let data = DataConfig {
            train: s.path("data.train"),
            valid: s.path("data.valid"),
            test: s.path("data.test"),
            vocab: s.path("data.vocab"),
            num_merges: s.get_or("data.num_merges", 4000)?,
            max_len: s.get_or("data.max_len", 200)?,
        };
        if data.max_len == 0 {
            return Err(s.error("data.max_len", "must be at least 1"));
        }
        if data.max_len + 2 > model.max_len {
            return Err(s.error(
                "data.max_len",
                format!("{} tokens plus BOS/EOS exceed model.max_len {}", data.max_len, model.max_len),
            ));
        }
        let beam = s.get_or("eval.beam", 4)?;
        if beam == 0 {
            return Err(s.error("eval.beam", "must be at least 1"));
        }
        Ok(RunConfig {
            out_dir: s.path("run.out_dir").unwrap_or_else(|| PathBuf::from("run")),
            model,
            train: train_config(s)?,
            data,
            beam,
        })
    }

    /// Effective settings, one `key = value` per line.
    pub fn echo(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let mut s = self.model.echo();
        s.push_str(&format!("model.dropout = {}\n", self.model.dropout));
        s.push_str(&self.train.echo());
        let _ = writeln!(s, "data.train = {}", opt(&self.data.train));
        let _ = writeln!(s, "data.valid = {}", opt(&self.data.valid));
        let _ = writeln!(s, "data.test = {}", opt(&self.data.test));
        let _ = writeln!(s, "data.vocab = {}", opt(&self.data.vocab));
        let _ = writeln!(s, "data.num_merges = {}", self.data.num_merges);
        let _ = writeln!(s, "data.max_len = {}", self.data.max_len);
        let _ = writeln!(s, "eval.beam = {}", self.beam);
        s
    }
}

/// Report name of the configured model: the preset as `<preset>-<scale>`,
/// or `model`.
pub fn model_name(s: &Settings) -> String {
    s.raw("model.preset").map_or_else(|| "model".to_string(), |p| p.replace(',', "-"))
}

pub fn cost_csv(reports: &[CostReport]) -> String {
    let mut s = String::from("name,params,gflops\n");
    for r in reports {
        let _ = writeln!(s, "{},{},{:.4}", r.name, r.params, r.gflops);
    }
    s
}

/// Cost of every preset at every scale, named `<preset>-<scale>`.
pub fn preset_costs(presets: &[Preset], scales: &[Scale]) -> Vec<CostReport> {
    scales
        .iter()
        .flat_map(|&sc| {
            presets.iter().map(move |&p| CostReport::new(&format!("{p}-{sc}"), &build_model_from_preset(p, sc)))
        })
        .collect()
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok(text.lines().map(crate::data::normalize).collect())
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut s = lines.join("\n");
    if !lines.is_empty() {
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Vocabulary::from_text(&text)
}

/// Learns a vocabulary from `data.train` and writes it to `data.vocab`, or to
/// `<out_dir>/vocab.bpe` when that key is absent.
pub fn learn_vocab(s: &Settings) -> Result<(Vocabulary, PathBuf)> {
    let cfg = RunConfig::from_settings(s)?;
    let train = s.require_path("data.train")?;
    let corpus = Corpus::load(&train)?;
    let vocab = Vocabulary::learn(corpus.sentences(), cfg.data.num_merges)?;
    let out = match cfg.data.vocab {
        Some(p) => p,
        None => {
            fs::create_dir_all(&cfg.out_dir)?;
            cfg.out_dir.join("vocab.bpe")
        }
    };
    fs::write(&out, vocab.to_text())?;
    Ok((vocab, out))
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub history: Vec<EpochMetrics>,
    pub bleu: Option<BleuReport>,
    /// Test sentences whose search hit the length limit.
    pub unfinished: usize,
}

fn encode_split(corpus: &Corpus, vocab: &Vocabulary, max_len: usize) -> Vec<SentencePair> {
    filter_by_length(corpus.encode(vocab), max_len)
}

/// Learns or loads the vocabulary, trains, saves the checkpoint, decodes and
/// scores the test split. Writes `config.echo`, `vocab.bpe`, `model.ckpt`,
/// `metrics.csv`, `cost.csv` and, with a test split, `bleu.txt` and
/// `test.hyp` into the run directory. `log` receives progress lines.
pub fn run_experiment(s: &Settings, mut log: impl FnMut(&str)) -> Result<RunSummary> {
    let mut cfg = RunConfig::from_settings(s)?;
    let train_prefix = s.require_path("data.train")?;
    let train_corpus = Corpus::load(&train_prefix)?;
    let valid_corpus = cfg.data.valid.as_deref().map(Corpus::load).transpose()?;
    let test_corpus = cfg.data.test.as_deref().map(Corpus::load).transpose()?;
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir)?;

    let vocab = match &cfg.data.vocab {
        Some(p) => read_vocab(p)?,
        None => Vocabulary::learn(train_corpus.sentences(), cfg.data.num_merges)?,
    };
    fs::write(dir.join("vocab.bpe"), vocab.to_text())?;
    cfg.model.vocab_size = vocab.len();
    cfg.model.validate()?;
    fs::write(dir.join("config.echo"), cfg.echo())?;
    log(&format!("vocabulary: {} tokens", vocab.len()));

    let train = encode_split(&train_corpus, &vocab, cfg.data.max_len);
    let valid = valid_corpus.map(|c| encode_split(&c, &vocab, cfg.data.max_len)).unwrap_or_default();
    if train.is_empty() {
        return Err(Error::Data(format!("no training pairs left after filtering to {} tokens", cfg.data.max_len)));
    }
    log(&format!("pairs: {} train, {} valid", train.len(), valid.len()));

    let name = model_name(s);
    fs::write(dir.join("cost.csv"), cost_csv(&[CostReport::new(&name, &cfg.model)]))?;

    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&cfg.model, &mut store, cfg.train.seed)?;
    let mut adam = Adam::new(&store);
    let metrics_path = dir.join("metrics.csv");
    fs::write(&metrics_path, metrics_csv(&[]))?;
    let mut so_far = Vec::new();
    let mut io_err = None;
    let history = train_loop(&model, &mut store, &mut adam, &train, &valid, &cfg.train, |m| {
        so_far.push(*m);
        log(&format!(
            "epoch {}: train_loss {:.4} valid_loss {:.4} lr {:.3e}",
            m.epoch, m.train_loss, m.valid_loss, m.lr
        ));
        if let Err(e) = fs::write(&metrics_path, metrics_csv(&so_far)) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    save_checkpoint(&dir.join("model.ckpt"), &Checkpoint::capture(&cfg.model.echo(), &store, &adam))?;

    let mut bleu = None;
    let mut unfinished = 0;
    if let Some(test) = test_corpus {
        let (hyps, u) = translate(&model, &store, &vocab, &test.src, cfg.beam)?;
        unfinished = u;
        write_lines(&dir.join("test.hyp"), &hyps)?;
        let report = bleu_corpus(&hyps, &test.tgt)?;
        fs::write(dir.join("bleu.txt"), format!("{report}\n{}\n{}\n", BleuReport::CSV_HEADER, report.csv_line()))?;
        log(&report.to_string());
        if u > 0 {
            log(&format!("warning: {u} test sentences reached the length limit without EOS"));
        }
        bleu = Some(report);
    }
    Ok(RunSummary { dir, history, bleu, unfinished })
}

/// Model, parameters and vocabulary of a finished run.
pub fn load_trained(s: &Settings) -> Result<(Model, ParamStore<f32>, Vocabulary)> {
    let mut cfg = RunConfig::from_settings(s)?;
    let vocab_path = s.path("translate.vocab").unwrap_or_else(|| cfg.out_dir.join("vocab.bpe"));
    let ckpt_path = s.path("translate.checkpoint").unwrap_or_else(|| cfg.out_dir.join("model.ckpt"));
    let vocab = read_vocab(&vocab_path)?;
    cfg.model.vocab_size = vocab.len();
    let mut template = ParamStore::<f32>::new();
    let model = Model::new(&cfg.model, &mut template, 0)?;
    let (store, _) = load_checkpoint(&ckpt_path)?.restore(&cfg.model.echo(), &template)?;
    Ok((model, store, vocab))
}

/// Translates `translate.input` with a trained run and returns the lines.
pub fn translate_file(s: &Settings) -> Result<(Vec<String>, usize)> {
    let input = s.require_path("translate.input")?;
    let beam = RunConfig::from_settings(s)?.beam;
    let (model, store, vocab) = load_trained(s)?;
    translate(&model, &store, &vocab, &read_lines(&input)?, beam)
}

/// BLEU of `score.hyp` against `score.ref`.
pub fn score_files(s: &Settings) -> Result<BleuReport> {
    let hyp = read_lines(&s.require_path("score.hyp")?)?;
    let refs = read_lines(&s.require_path("score.ref")?)?;
    bleu_corpus(&hyp, &refs)
}

#[cfg(test)]
mod tests;
