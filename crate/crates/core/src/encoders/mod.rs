//! The five encoder branch kinds. Every branch maps `[B, T, d]` to
//! `[B, T, d]`; `lengths[b]` gives the number of real (non-pad) positions of
//! sentence `b`, padding always sits at the tail.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{glu, Ctx, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, ParamId};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Stabiliser in the row normalisation of static expansion.
pub const PSI_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EncoderKind {
    SelfAttention,
    Lstm,
    ConvS2S,
    StaticExpansion,
    FNet,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 5] = [
        EncoderKind::SelfAttention,
        EncoderKind::Lstm,
        EncoderKind::ConvS2S,
        EncoderKind::StaticExpansion,
        EncoderKind::FNet,
    ];

    /// One-letter code: B, L, C, S, F.
    pub fn letter(self) -> char {
        match self {
            EncoderKind::SelfAttention => 'B',
            EncoderKind::Lstm => 'L',
            EncoderKind::ConvS2S => 'C',
            EncoderKind::StaticExpansion => 'S',
            EncoderKind::FNet => 'F',
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EncoderKind::SelfAttention => "base",
            EncoderKind::Lstm => "lstm",
            EncoderKind::ConvS2S => "conv",
            EncoderKind::StaticExpansion => "static",
            EncoderKind::FNet => "fnet",
        };
        f.write_str(s)
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "b" | "base" | "attention" | "self-attention" => EncoderKind::SelfAttention,
            "l" | "lstm" => EncoderKind::Lstm,
            "c" | "conv" | "convs2s" => EncoderKind::ConvS2S,
            "s" | "static" | "static-expansion" | "expansion" => EncoderKind::StaticExpansion,
            "f" | "fnet" | "fourier" => EncoderKind::FNet,
            other => return Err(Error::Config(format!("unknown encoder kind `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub layers: usize,
    /// ConvS2S only; odd.
    pub kernel_width: usize,
    /// Static expansion only; one coefficient per layer.
    pub expansion_coeffs: Vec<usize>,
}

impl EncoderSpec {
    pub fn new(kind: EncoderKind, layers: usize) -> Self {
        EncoderSpec { kind, layers, kernel_width: 3, expansion_coeffs: Vec::new() }
    }

    /// Static expansion spec whose coefficients cycle through `coeffs`.
    pub fn static_expansion(layers: usize, coeffs: &[usize]) -> Self {
        let expansion_coeffs = (0..layers).map(|i| coeffs[i % coeffs.len()]).collect();
        EncoderSpec { kind: EncoderKind::StaticExpansion, layers, kernel_width: 3, expansion_coeffs }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == EncoderKind::ConvS2S && self.kernel_width.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel width must be odd, got {}", self.kernel_width)));
        }
        if self.kind == EncoderKind::StaticExpansion {
            if self.expansion_coeffs.len() != self.layers {
                return Err(Error::Config(format!(
                    "{} expansion coefficients for {} static expansion layers",
                    self.expansion_coeffs.len(),
                    self.layers
                )));
            }
            if self.expansion_coeffs.contains(&0) {
                return Err(Error::Config("expansion coefficients must be positive".into()));
            }
        }
        Ok(())
    }

    /// Learnable scalars in this branch.
    pub fn param_count(&self, d: usize, d_ff: usize) -> usize {
        let norm = 2 * d;
        match self.kind {
            EncoderKind::SelfAttention => {
                self.layers * (MultiHeadAttention::param_count(d) + FeedForward::param_count(d, d_ff) + 2 * norm)
            }
            EncoderKind::Lstm => self.layers * (8 * d * d + 4 * d + norm),
            EncoderKind::ConvS2S => self.layers * Linear::param_count(self.kernel_width * d, 2 * d, true),
            EncoderKind::StaticExpansion => self
                .expansion_coeffs
                .iter()
                .map(|&n| 4 * Linear::param_count(d, d, true) + 2 * n * d + d * d + norm)
                .sum(),
            EncoderKind::FNet => self.layers * (FeedForward::param_count(d, d_ff) + 2 * norm),
        }
    }

    /// Multiply-accumulates of one forward pass over a single sequence of
    /// length `t`.
    pub fn macs(&self, t: usize, d: usize, d_ff: usize) -> f64 {
        let (t, d, d_ff) = (t as f64, d as f64, d_ff as f64);
        let attn = 4.0 * t * d * d + 2.0 * t * t * d;
        let ff = 2.0 * t * d * d_ff;
        let layers = self.layers as f64;
        match self.kind {
            EncoderKind::SelfAttention => layers * (attn + ff),
            EncoderKind::Lstm => layers * 8.0 * t * d * d,
            EncoderKind::ConvS2S => layers * t * self.kernel_width as f64 * d * 2.0 * d,
            EncoderKind::StaticExpansion => self
                .expansion_coeffs
                .iter()
                .map(|&n| {
                    let n = n as f64;
                    // projections, bilinear form, enrichment, L, two forward and two backward transports
                    4.0 * t * d * d + 2.0 * t * d * d + 2.0 * n * d * d + n * t * d + 2.0 * n * t * d + 2.0 * t * n * d
                })
                .sum(),
            // DFT along time then along the hidden axis, counted as dense transforms
            EncoderKind::FNet => layers * (t * t * d + t * d * d + ff),
        }
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Attention { att: MultiHeadAttention, norm1: LayerNorm, ff: FeedForward, norm2: LayerNorm },
    Lstm(LstmLayer),
    Conv { proj: Linear, width: usize },
    Expansion(ExpansionLayer),
    FNet { norm1: LayerNorm, ff: FeedForward, norm2: LayerNorm },
}

/// Uni-directional LSTM with gate blocks ordered forget, input, output, cell.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub norm: LayerNorm,
    pub d: usize,
}

#[derive(Clone, Debug)]
pub struct ExpansionLayer {
    pub key: Linear,
    pub value_a: Linear,
    pub value_b: Linear,
    pub gate: Linear,
    pub e_q: ParamId,
    pub e_b: ParamId,
    pub bilinear: ParamId,
    pub norm: LayerNorm,
    pub n_e: usize,
}

/// A built branch: one homogeneous stack of layers.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub spec: EncoderSpec,
    layers: Vec<Layer>,
}

impl Encoder {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        name: &str,
        spec: &EncoderSpec,
        d: usize,
        heads: usize,
        d_ff: usize,
    ) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers {
            let p = format!("{name}.{l}");
            layers.push(match spec.kind {
                EncoderKind::SelfAttention => Layer::Attention {
                    att: MultiHeadAttention::new(init, &format!("{p}.att"), d, heads)?,
                    norm1: LayerNorm::new(init, &format!("{p}.norm1"), d),
                    ff: FeedForward::new(init, &format!("{p}.ff"), d, d_ff),
                    norm2: LayerNorm::new(init, &format!("{p}.norm2"), d),
                },
                EncoderKind::Lstm => Layer::Lstm(LstmLayer::new(init, &p, d)),
                EncoderKind::ConvS2S => Layer::Conv {
                    proj: Linear::new(init, &format!("{p}.conv"), spec.kernel_width * d, 2 * d, true),
                    width: spec.kernel_width,
                },
                EncoderKind::StaticExpansion => {
                    Layer::Expansion(ExpansionLayer::new(init, &p, d, spec.expansion_coeffs[l]))
                }
                EncoderKind::FNet => Layer::FNet {
                    norm1: LayerNorm::new(init, &format!("{p}.norm1"), d),
                    ff: FeedForward::new(init, &format!("{p}.ff"), d, d_ff),
                    norm2: LayerNorm::new(init, &format!("{p}.norm2"), d),
                },
            });
        }
        Ok(Encoder { spec: spec.clone(), layers })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: Var, lengths: &[usize]) -> Result<Var> {
        let shape = ctx.g.shape(x);
        if shape.len() != 3 || lengths.len() != shape[0] || lengths.iter().any(|&l| l == 0 || l > shape[1]) {
            return Err(Error::shape("encoder input", &shape, lengths));
        }
        let (b, t) = (shape[0], shape[1]);
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Attention { att, norm1, ff, norm2 } => {
                    let mask = key_mask(b, t, t, lengths);
                    let a = ctx.dropout(att.forward(ctx, h, h, &mask)?)?;
                    let h1 = norm1.forward(ctx, ctx.g.add(h, a)?)?;
                    let f = ctx.dropout(ff.forward(ctx, h1)?)?;
                    norm2.forward(ctx, ctx.g.add(h1, f)?)?
                }
                Layer::Lstm(l) => l.forward(ctx, h)?,
                Layer::Conv { proj, width } => conv_layer(ctx, proj, *width, h, lengths)?,
                Layer::Expansion(e) => e.forward(ctx, h, lengths)?,
                Layer::FNet { norm1, ff, norm2 } => {
                    let m = ctx.dropout(ctx.g.fourier_mix(h, lengths)?)?;
                    let h1 = norm1.forward(ctx, ctx.g.add(h, m)?)?;
                    let f = ctx.dropout(ff.forward(ctx, h1)?)?;
                    norm2.forward(ctx, ctx.g.add(h1, f)?)?
                }
            };
        }
        Ok(h)
    }
}

/// `[B, Tq, Tk]` visibility of keys shorter than each sentence's length.
pub fn key_mask(b: usize, tq: usize, tk: usize, lengths: &[usize]) -> Vec<bool> {
    let mut m = Vec::with_capacity(b * tq * tk);
    for &len in lengths.iter().take(b) {
        for _ in 0..tq {
            m.extend((0..tk).map(|k| k < len));
        }
    }
    m
}

/// `[B, T, d]` multiplier that is 1 on real positions and 0 on padding.
fn position_mask<T: Scalar>(b: usize, t: usize, d: usize, lengths: &[usize]) -> Vec<T> {
    let mut m = Vec::with_capacity(b * t * d);
    for &len in lengths.iter().take(b) {
        for p in 0..t {
            let v = if p < len { T::one() } else { T::zero() };
            m.extend(std::iter::repeat_n(v, d));
        }
    }
    m
}

impl LstmLayer {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, d: usize) -> Self {
        let w = init.xavier(&format!("{name}.lstm.w"), &[d, 4 * d]);
        let u = init.xavier(&format!("{name}.lstm.u"), &[d, 4 * d]);
        // forget gate bias starts at 1
        let bias = (0..4 * d).map(|i| if i < d { T::one() } else { T::zero() }).collect();
        let b = init.store.add(format!("{name}.lstm.b"), Tensor::new(vec![4 * d], bias).unwrap());
        LstmLayer { w, u, b, norm: LayerNorm::new(init, &format!("{name}.norm"), d), d }
    }

    /// Recurrence over time followed by layer normalisation, no skip path.
    /// Causal, so tail padding never reaches real positions.
    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        let g = ctx.g;
        let s = g.shape(x);
        let (b, t, d) = (s[0], s[1], self.d);
        let xw = g.add_broadcast(g.matmul(x, ctx.p(self.w))?, ctx.p(self.b))?;
        let u = ctx.p(self.u);
        let mut h: Option<Var> = None;
        let mut c: Option<Var> = None;
        let mut outs = Vec::with_capacity(t);
        for step in 0..t {
            let mut pre = g.reshape(g.slice(xw, 1, step, 1)?, &[b, 4 * d])?;
            if let Some(hp) = h {
                pre = g.add(pre, g.matmul(hp, u)?)?;
            }
            let gate = |k: usize| g.slice(pre, 1, k * d, d);
            let f = g.sigmoid(gate(0)?);
            let i = g.sigmoid(gate(1)?);
            let o = g.sigmoid(gate(2)?);
            let z = g.tanh(gate(3)?);
            let iz = g.mul(i, z)?;
            let cn = match c {
                Some(cp) => g.add(g.mul(f, cp)?, iz)?,
                None => iz,
            };
            let hn = g.mul(o, g.tanh(cn))?;
            outs.push(g.reshape(hn, &[b, 1, d])?);
            h = Some(hn);
            c = Some(cn);
        }
        let seq = g.concat(&outs, 1)?;
        let seq = ctx.dropout(seq)?;
        self.norm.forward(ctx, seq)
    }
}

/// Zero-padded 1-D convolution (k taps, `d -> 2d`), GLU, then the skip path.
fn conv_layer<T: Scalar>(ctx: &Ctx<T>, proj: &Linear, width: usize, x: Var, lengths: &[usize]) -> Result<Var> {
    let g = ctx.g;
    let s = g.shape(x);
    let xm = g.mul_const(x, position_mask(s[0], s[1], s[2], lengths))?;
    let r = (width / 2) as isize;
    let taps: Vec<Var> = (-r..=r).map(|o| g.shift(xm, 1, o)).collect::<Result<_>>()?;
    let window = if taps.len() == 1 { taps[0] } else { g.concat(&taps, 2)? };
    let y = glu(g, proj.forward(ctx, window)?)?;
    let y = ctx.dropout(y)?;
    g.add(x, y)
}

impl ExpansionLayer {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, d: usize, n_e: usize) -> Self {
        ExpansionLayer {
            key: Linear::new(init, &format!("{name}.key"), d, d, true),
            value_a: Linear::new(init, &format!("{name}.value_a"), d, d, true),
            value_b: Linear::new(init, &format!("{name}.value_b"), d, d, true),
            gate: Linear::new(init, &format!("{name}.gate"), d, d, true),
            e_q: init.xavier(&format!("{name}.e_q"), &[n_e, d]),
            e_b: init.xavier(&format!("{name}.e_b"), &[n_e, d]),
            bilinear: init.xavier(&format!("{name}.bilinear"), &[d, d]),
            norm: LayerNorm::new(init, &format!("{name}.norm"), d),
            n_e,
        }
    }

    /// Expansion to `n_e` slots and back, sign-split transports, sigmoid gate,
    /// then skip + layer norm.
    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: Var, lengths: &[usize]) -> Result<Var> {
        let out = self.mix(ctx, x, lengths)?;
        let out = ctx.dropout(out)?;
        self.norm.forward(ctx, ctx.g.add(x, out)?)
    }

    /// The layer body without dropout, skip and norm.
    pub fn mix<T: Scalar>(&self, ctx: &Ctx<T>, x: Var, lengths: &[usize]) -> Result<Var> {
        let g = ctx.g;
        let s = g.shape(x);
        let (b, t, d, n) = (s[0], s[1], s[2], self.n_e);
        let xm = g.mul_const(x, position_mask(b, t, d, lengths))?;

        let m = bilinear_form(g, xm, ctx.p(self.bilinear), lengths)?;
        let e_q = g.matmul(ctx.p(self.e_q), m)?;
        let e_b = g.matmul(ctx.p(self.e_b), m)?;

        let k = self.key.forward(ctx, x)?;
        let kt = g.permute(k, &[0, 2, 1])?;
        let l = g.scale(g.matmul(e_q, kt)?, T::lit(1.0 / (d as f64).sqrt()));
        let mut cols = Vec::with_capacity(b * n * t);
        for &len in lengths {
            for _ in 0..n {
                cols.extend((0..t).map(|p| if p < len { T::one() } else { T::zero() }));
            }
        }
        let l = g.mul_const(l, cols)?;
        let lt = g.permute(l, &[0, 2, 1])?;

        let eps = T::lit(PSI_EPS);
        let values = [self.value_a.forward(ctx, x)?, self.value_b.forward(ctx, x)?];
        let mut branches = Vec::with_capacity(2);
        for (i, &v) in values.iter().enumerate() {
            let sign = |y: Var| if i == 0 { y } else { g.neg(y) };
            let p_fw = g.psi_normalize(g.relu(sign(l)), eps)?;
            let f = g.add(g.matmul(p_fw, v)?, e_b)?;
            let p_bw = g.psi_normalize(g.relu(sign(lt)), eps)?;
            branches.push(g.relu(g.matmul(p_bw, f)?));
        }
        let gate = g.sigmoid(self.gate.forward(ctx, x)?);
        let diff = g.sub(branches[0], branches[1])?;
        g.add(g.mul(gate, diff)?, branches[1])
    }
}

/// `Xᵀ(X W) / sqrt(T)` per sentence, with `X` already zero on padding and `T`
/// the real length. Returns `[B, d, d]`.
pub fn bilinear_form<T: Scalar>(g: &Graph<T>, x: Var, w: Var, lengths: &[usize]) -> Result<Var> {
    let s = g.shape(x);
    let d = s[2];
    let xt = g.permute(x, &[0, 2, 1])?;
    let m = g.matmul(xt, g.matmul(x, w)?)?;
    let mut scale = Vec::with_capacity(s[0] * d * d);
    for &len in lengths {
        let c = T::lit(1.0 / (len as f64).sqrt());
        scale.extend(std::iter::repeat_n(c, d * d));
    }
    g.mul_const(m, scale)
}
