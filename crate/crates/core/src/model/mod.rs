//! The multi-encoder translation model: a shared embedding front-end, parallel
//! encoder branches whose outputs are summed into one memory, a Transformer
//! decoder, and an output projection tied to the embedding table.

use std::fmt::Write as _;

use crate::encoders::{key_mask, Encoder, EncoderKind, EncoderSpec};
use crate::error::{Error, Result};
use crate::nn::{
    add_positions, embed, Ctx, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore,
};
use crate::tensor::{Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    Sum,
    /// Concatenate branch outputs on the hidden axis and project back to `d`.
    Concat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub decoder_layers: usize,
    pub encoders: Vec<EncoderSpec>,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub combine: Combine,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 512,
            heads: 8,
            d_ff: 2048,
            decoder_layers: 6,
            encoders: vec![EncoderSpec::new(EncoderKind::SelfAttention, 6)],
            vocab_size: 4384,
            max_len: 256,
            dropout: 0.1,
            combine: Combine::Sum,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoders.is_empty() {
            return Err(Error::Config("model needs at least one encoder branch".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads)));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!("d_model must be even, got {}", self.d_model)));
        }
        if self.d_ff == 0 || self.vocab_size < 5 || self.max_len == 0 {
            return Err(Error::Config("d_ff, max_len must be positive and vocab_size at least 5".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        self.encoders.iter().try_for_each(EncoderSpec::validate)
    }

    /// Canonical `model.key = value` lines describing the architecture. Two
    /// models with equal echoes have identical parameter layouts.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let kinds: Vec<String> = self.encoders.iter().map(|e| e.kind.to_string()).collect();
        let layers: Vec<String> = self.encoders.iter().map(|e| e.layers.to_string()).collect();
        let coeffs: Vec<String> = self
            .encoders
            .iter()
            .filter(|e| e.kind == EncoderKind::StaticExpansion)
            .flat_map(|e| e.expansion_coeffs.iter().map(usize::to_string))
            .collect();
        let kernel = self.encoders.iter().find(|e| e.kind == EncoderKind::ConvS2S).map_or(3, |e| e.kernel_width);
        let _ = writeln!(s, "model.d_model = {}", self.d_model);
        let _ = writeln!(s, "model.heads = {}", self.heads);
        let _ = writeln!(s, "model.d_ff = {}", self.d_ff);
        let _ = writeln!(s, "model.decoder_layers = {}", self.decoder_layers);
        let _ = writeln!(s, "model.encoders = {}", kinds.join(","));
        let _ = writeln!(s, "model.branch_layers = {}", layers.join(","));
        let _ = writeln!(s, "model.kernel_width = {kernel}");
        let _ = writeln!(s, "model.expansion_coeffs = {}", coeffs.join(","));
        let _ = writeln!(s, "model.vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "model.max_len = {}", self.max_len);
        let _ = writeln!(
            s,
            "model.combine = {}",
            match self.combine {
                Combine::Sum => "sum",
                Combine::Concat => "concat",
            }
        );
        s
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_att: MultiHeadAttention,
    norm1: LayerNorm,
    cross: MultiHeadAttention,
    norm2: LayerNorm,
    ff: FeedForward,
    norm3: LayerNorm,
}

impl DecoderLayer {
    fn param_count(d: usize, d_ff: usize) -> usize {
        2 * MultiHeadAttention::param_count(d) + FeedForward::param_count(d, d_ff) + 3 * 2 * d
    }
}

/// Token ids of a padded batch, row-major `[rows, len]`, with per-row lengths.
#[derive(Clone, Copy, Debug)]
pub struct Ids<'a> {
    pub ids: &'a [usize],
    pub rows: usize,
    pub len: usize,
    pub lengths: &'a [usize],
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub embedding: ParamId,
    pub encoders: Vec<Encoder>,
    combine_proj: Option<Linear>,
    decoder: Vec<DecoderLayer>,
}

impl Model {
    /// Builds the model and appends freshly initialised parameters to `store`.
    pub fn new<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let (d, h, f) = (cfg.d_model, cfg.heads, cfg.d_ff);
        let mut init = Init::new(store, seed);
        let embedding = init.xavier("embedding", &[cfg.vocab_size, d]);
        let encoders = cfg
            .encoders
            .iter()
            .enumerate()
            .map(|(i, spec)| Encoder::new(&mut init, &format!("enc{i}"), spec, d, h, f))
            .collect::<Result<Vec<_>>>()?;
        let combine_proj = (cfg.combine == Combine::Concat)
            .then(|| Linear::new(&mut init, "combine", d * cfg.encoders.len(), d, true));
        let mut decoder = Vec::with_capacity(cfg.decoder_layers);
        for l in 0..cfg.decoder_layers {
            let p = format!("dec.{l}");
            decoder.push(DecoderLayer {
                self_att: MultiHeadAttention::new(&mut init, &format!("{p}.self"), d, h)?,
                norm1: LayerNorm::new(&mut init, &format!("{p}.norm1"), d),
                cross: MultiHeadAttention::new(&mut init, &format!("{p}.cross"), d, h)?,
                norm2: LayerNorm::new(&mut init, &format!("{p}.norm2"), d),
                ff: FeedForward::new(&mut init, &format!("{p}.ff"), d, f),
                norm3: LayerNorm::new(&mut init, &format!("{p}.norm3"), d),
            });
        }
        Ok(Model { cfg: cfg.clone(), embedding, encoders, combine_proj, decoder })
    }

    fn front_end<T: Scalar>(&self, ctx: &Ctx<T>, x: Ids) -> Result<Var> {
        if x.len > self.cfg.max_len {
            return Err(Error::Data(format!("sequence length {} exceeds max_len {}", x.len, self.cfg.max_len)));
        }
        let e = embed(ctx, self.embedding, x.ids, x.rows, x.len)?;
        let e = add_positions(ctx.g, e)?;
        ctx.dropout(e)
    }

    /// Memory `[B, Ts, d]`: the sum of all branch outputs over one shared
    /// embedded input.
    pub fn encode<T: Scalar>(&self, ctx: &Ctx<T>, src: Ids) -> Result<Var> {
        let x = self.front_end(ctx, src)?;
        let outs = self.encoders.iter().map(|e| e.forward(ctx, x, src.lengths)).collect::<Result<Vec<_>>>()?;
        match &self.combine_proj {
            None => outs[1..].iter().try_fold(outs[0], |acc, &o| ctx.g.add(acc, o)),
            Some(proj) => {
                let cat = if outs.len() == 1 { outs[0] } else { ctx.g.concat(&outs, 2)? };
                proj.forward(ctx, cat)
            }
        }
    }

    /// Vocabulary logits `[B, Tt, V]` for decoder inputs `tgt` attending to
    /// `memory` whose real lengths are `src_lengths`.
    pub fn decode<T: Scalar>(&self, ctx: &Ctx<T>, tgt: Ids, memory: Var, src_lengths: &[usize]) -> Result<Var> {
        let g = ctx.g;
        let (b, tt) = (tgt.rows, tgt.len);
        let ts = g.shape(memory)[1];
        let mut self_mask = Vec::with_capacity(b * tt * tt);
        for &len in tgt.lengths {
            for q in 0..tt {
                self_mask.extend((0..tt).map(|k| k <= q && k < len.max(1)));
            }
        }
        let cross_mask = key_mask(b, tt, ts, src_lengths);
        let mut h = self.front_end(ctx, tgt)?;
        for layer in &self.decoder {
            let a = ctx.dropout(layer.self_att.forward(ctx, h, h, &self_mask)?)?;
            h = layer.norm1.forward(ctx, g.add(h, a)?)?;
            let c = ctx.dropout(layer.cross.forward(ctx, h, memory, &cross_mask)?)?;
            h = layer.norm2.forward(ctx, g.add(h, c)?)?;
            let f = ctx.dropout(layer.ff.forward(ctx, h)?)?;
            h = layer.norm3.forward(ctx, g.add(h, f)?)?;
        }
        let table_t = g.transpose(ctx.p(self.embedding))?;
        g.matmul(h, table_t)
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, src: Ids, tgt: Ids) -> Result<Var> {
        let memory = self.encode(ctx, src)?;
        self.decode(ctx, tgt, memory, src.lengths)
    }

    /// Label-smoothed cross-entropy of predicting `targets` (same layout as
    /// `tgt`, padded positions excluded).
    pub fn loss<T: Scalar>(&self, ctx: &Ctx<T>, src: Ids, tgt: Ids, targets: &[usize], gamma: f64) -> Result<Var> {
        let logits = self.forward(ctx, src, tgt)?;
        let mask: Vec<bool> = tgt.lengths.iter().flat_map(|&l| (0..tgt.len).map(move |p| p < l)).collect();
        ctx.g.label_smoothed_ce(logits, targets, &mask, T::lit(gamma))
    }
}

/// Exact number of learnable scalars of a model built from `cfg`.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let branches: usize = cfg.encoders.iter().map(|e| e.param_count(d, f)).sum();
    let combine = match cfg.combine {
        Combine::Sum => 0,
        Combine::Concat => Linear::param_count(d * cfg.encoders.len(), d, true),
    };
    cfg.vocab_size * d + branches + combine + cfg.decoder_layers * DecoderLayer::param_count(d, f)
}

/// Forward-pass GFLOPs for one sentence pair of the given lengths, counting
/// two FLOPs per multiply-accumulate of every matrix product.
pub fn estimate_flops(cfg: &ModelConfig, t_src: usize, t_tgt: usize) -> f64 {
    let (d, f) = (cfg.d_model as f64, cfg.d_ff as f64);
    let (ts, tt) = (t_src as f64, t_tgt as f64);
    let mut macs: f64 = cfg.encoders.iter().map(|e| e.macs(t_src, cfg.d_model, cfg.d_ff)).sum();
    if cfg.combine == Combine::Concat {
        macs += ts * cfg.encoders.len() as f64 * d * d;
    }
    let self_att = 4.0 * tt * d * d + 2.0 * tt * tt * d;
    let cross = 2.0 * tt * d * d + 2.0 * ts * d * d + 2.0 * tt * ts * d;
    let ff = 2.0 * tt * d * f;
    macs += cfg.decoder_layers as f64 * (self_att + cross + ff);
    macs += tt * d * cfg.vocab_size as f64;
    2.0 * macs / 1e9
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub name: String,
    pub params: usize,
    /// GFLOPs of one forward step over 128 source and 128 target tokens.
    pub gflops: f64,
}

impl CostReport {
    pub fn new(name: &str, cfg: &ModelConfig) -> Self {
        CostReport { name: name.to_string(), params: count_params(cfg), gflops: estimate_flops(cfg, 128, 128) }
    }
}

#[cfg(test)]
mod tests;
