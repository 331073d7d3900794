//! Parametric building blocks shared by the encoder branches and the decoder.
//!
//! Layers only hold [`ParamId`] handles into a [`ParamStore`]; the numbers live
//! in the store so that one model description serves both `f32` training and
//! `f64` gradient checks. A [`Ctx`] binds a store to one [`Graph`] for a single
//! forward pass and registers parameters on first use.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{numel, Graph, Scalar, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Same names and shapes, values converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::new(t.shape.clone(), t.to_f64().iter().map(|&x| U::lit(x)).collect()).unwrap())
                .collect(),
        }
    }
}

/// Allocates parameters with their initial values.
pub struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: ChaCha8Rng,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Init { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform Xavier over the last two dimensions.
    pub fn xavier(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let r = shape.len();
        let (fan_in, fan_out) = (shape[r.saturating_sub(2)], shape[r - 1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..numel(shape)).map(|_| T::lit(self.rng.gen_range(-limit..limit))).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data).unwrap())
    }

    pub fn fill(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let data = vec![T::lit(value); numel(shape)];
        self.store.add(name, Tensor::new(shape.to_vec(), data).unwrap())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a graph, the parameters it reads and the dropout stream.
pub struct Ctx<'g, T: Scalar> {
    pub g: &'g Graph<T>,
    source: Source<'g, T>,
    bound: RefCell<Vec<Option<Var>>>,
    mode: Mode,
    dropout: f64,
    rng: RefCell<ChaCha8Rng>,
}

enum Source<'g, T> {
    Store(&'g ParamStore<T>),
    Vars(Vec<Var>),
}

impl<'g, T: Scalar> Ctx<'g, T> {
    pub fn new(g: &'g Graph<T>, store: &'g ParamStore<T>, mode: Mode, dropout: f64, seed: u64) -> Result<Self> {
        check_dropout(dropout)?;
        Ok(Ctx {
            g,
            bound: RefCell::new(vec![None; store.len()]),
            source: Source::Store(store),
            mode,
            dropout,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        })
    }

    /// Evaluation context without dropout.
    pub fn eval(g: &'g Graph<T>, store: &'g ParamStore<T>) -> Self {
        Self::new(g, store, Mode::Eval, 0.0, 0).unwrap()
    }

    /// Uses existing graph variables as the parameters, `vars[i]` standing for
    /// `ParamId(i)`. Used by gradient checks that perturb parameters directly.
    pub fn from_vars(g: &'g Graph<T>, vars: Vec<Var>) -> Self {
        Ctx {
            g,
            bound: RefCell::new(Vec::new()),
            source: Source::Vars(vars),
            mode: Mode::Eval,
            dropout: 0.0,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn p(&self, id: ParamId) -> Var {
        match &self.source {
            Source::Vars(v) => v[id.0],
            Source::Store(store) => {
                let mut bound = self.bound.borrow_mut();
                *bound[id.0].get_or_insert_with(|| self.g.param(store.get(id).clone()))
            }
        }
    }

    /// Gradients of every parameter touched by this pass, after `backward`.
    pub fn grads(&self) -> Vec<Option<Vec<T>>> {
        match &self.source {
            Source::Vars(v) => v.iter().map(|&x| self.g.grad(x)).collect(),
            Source::Store(_) => self.bound.borrow().iter().map(|b| b.and_then(|x| self.g.grad(x))).collect(),
        }
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(&self, x: Var) -> Result<Var> {
        dropout(self.g, x, self.dropout, self.mode, &mut self.rng.borrow_mut())
    }
}

fn check_dropout(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability must lie in [0, 1), got {p}")));
    }
    Ok(())
}

pub fn dropout<T: Scalar>(g: &Graph<T>, x: Var, p: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
    check_dropout(p)?;
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let keep = T::lit(1.0 / (1.0 - p));
    let n = g.value(x).numel();
    let m = (0..n).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
    g.mul_const(x, m)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = init.xavier(&format!("{name}.w"), &[d_in, d_out]);
        let bias = bias.then(|| init.fill(&format!("{name}.b"), &[d_out], 0.0));
        Linear { weight, bias, d_in, d_out }
    }

    pub fn param_count(d_in: usize, d_out: usize, bias: bool) -> usize {
        d_in * d_out + if bias { d_out } else { 0 }
    }

    /// `x[..., d_in] · W + b`.
    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        let y = ctx.g.matmul(x, ctx.p(self.weight))?;
        match self.bias {
            Some(b) => ctx.g.add_broadcast(y, ctx.p(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: init.fill(&format!("{name}.gain"), &[d], 1.0),
            bias: init.fill(&format!("{name}.bias"), &[d], 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        ctx.g.layer_norm(x, ctx.p(self.gain), ctx.p(self.bias), T::lit(LAYER_NORM_EPS))
    }
}

/// Position-wise `outer(relu(inner(x)))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, d: usize, d_ff: usize) -> Self {
        FeedForward {
            inner: Linear::new(init, &format!("{name}.inner"), d, d_ff, true),
            outer: Linear::new(init, &format!("{name}.outer"), d_ff, d, true),
        }
    }

    pub fn param_count(d: usize, d_ff: usize) -> usize {
        Linear::param_count(d, d_ff, true) + Linear::param_count(d_ff, d, true)
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        let h = ctx.g.relu(self.inner.forward(ctx, x)?);
        let h = ctx.dropout(h)?;
        self.outer.forward(ctx, h)
    }
}

/// Gated linear unit over the two halves of the last axis: `a ⊙ sigmoid(b)`.
pub fn glu<T: Scalar>(g: &Graph<T>, ab: Var) -> Result<Var> {
    let shape = g.shape(ab);
    let axis = shape.len() - 1;
    let two_d = shape[axis];
    if !two_d.is_multiple_of(2) {
        return Err(Error::shape("glu", &shape, &[2 * (two_d / 2 + 1)]));
    }
    let a = g.slice(ab, axis, 0, two_d / 2)?;
    let b = g.slice(ab, axis, two_d / 2, two_d / 2)?;
    g.mul(a, g.sigmoid(b))
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("model dimension {d} is not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(init, &format!("{name}.q"), d, d, true),
            k: Linear::new(init, &format!("{name}.k"), d, d, true),
            v: Linear::new(init, &format!("{name}.v"), d, d, true),
            o: Linear::new(init, &format!("{name}.o"), d, d, true),
            heads,
            d,
        })
    }

    pub fn param_count(d: usize) -> usize {
        4 * Linear::param_count(d, d, true)
    }

    /// `query: [B, Tq, d]`, `memory: [B, Tk, d]`, `mask: B*Tq*Tk` with true
    /// marking visible keys.
    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, query: Var, memory: Var, mask: &[bool]) -> Result<Var> {
        let g = ctx.g;
        let (qs, ms) = (g.shape(query), g.shape(memory));
        if qs.len() != 3 || ms.len() != 3 || qs[0] != ms[0] || qs[2] != self.d || ms[2] != self.d {
            return Err(Error::shape("attention", &qs, &ms));
        }
        let (b, tq, tk, h) = (qs[0], qs[1], ms[1], self.heads);
        if mask.len() != b * tq * tk {
            return Err(Error::shape("attention mask", &[b, tq, tk], &[mask.len()]));
        }
        let dk = self.d / h;
        let split = |x: Var, t: usize, perm: &[usize]| -> Result<Var> {
            let x = g.reshape(x, &[b, t, h, dk])?;
            g.permute(x, perm)
        };
        let q = split(self.q.forward(ctx, query)?, tq, &[0, 2, 1, 3])?;
        let k = split(self.k.forward(ctx, memory)?, tk, &[0, 2, 3, 1])?;
        let v = split(self.v.forward(ctx, memory)?, tk, &[0, 2, 1, 3])?;
        let scores = g.scale(g.matmul(q, k)?, T::lit(1.0 / (dk as f64).sqrt()));
        let mut full = Vec::with_capacity(b * h * tq * tk);
        for bi in 0..b {
            for _ in 0..h {
                full.extend_from_slice(&mask[bi * tq * tk..(bi + 1) * tq * tk]);
            }
        }
        let attn = g.softmax_masked(scores, Some(&full))?;
        let attn = ctx.dropout(attn)?;
        let ctxv = g.matmul(attn, v)?;
        let ctxv = g.permute(ctxv, &[0, 2, 1, 3])?;
        let ctxv = g.reshape(ctxv, &[b, tq, self.d])?;
        self.o.forward(ctx, ctxv)
    }
}

/// Sinusoidal table: `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(..)`.
pub fn positional_encoding<T: Scalar>(len: usize, d: usize) -> Result<Tensor<T>> {
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!("positional encoding needs an even dimension, got {d}")));
    }
    let mut data = vec![T::zero(); len * d];
    for t in 0..len {
        for i in 0..d / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[t * d + 2 * i] = T::lit(angle.sin());
            data[t * d + 2 * i + 1] = T::lit(angle.cos());
        }
    }
    Tensor::new(vec![len, d], data)
}

/// Embedding lookup scaled by `sqrt(d)`.
pub fn embed<T: Scalar>(ctx: &Ctx<T>, table: ParamId, ids: &[usize], batch: usize, len: usize) -> Result<Var> {
    let d = ctx.g.shape(ctx.p(table))[1];
    ctx.g.embed(ctx.p(table), ids, &[batch, len], T::lit((d as f64).sqrt()))
}

/// Adds the positional table to every row of a `[B, T, d]` tensor.
pub fn add_positions<T: Scalar>(g: &Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x);
    let pe = g.constant(positional_encoding::<T>(s[1], s[2])?);
    g.add_broadcast(x, pe)
}
