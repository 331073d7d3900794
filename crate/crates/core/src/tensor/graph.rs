use std::cell::{Ref, RefCell};

use super::kernels::gemm;
use super::{fourier_mix, numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct MatLayout {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, layout: MatLayout },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast { x: Var, y: Var },
    MulConst { x: Var, c: Vec<T> },
    Scale { x: Var, s: T },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embed { table: Var, ids: Vec<usize>, scale: T },
    Shift { x: Var, axis: usize, offset: isize },
    PsiNorm { x: Var, eps: T },
    FourierMix { x: Var, lengths: Vec<usize> },
    Sum(Var),
    SmoothedCe { logits: Var, targets: Vec<usize>, mask: Vec<bool>, gamma: T, probs: Vec<T>, count: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Sign pattern of every relu input seen so far, used by the gradient checker
/// to detect finite-difference steps that cross a kink.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct KinkTrace {
    pub signature: u64,
    pub min_margin: f64,
}

/// Append-only record of one forward pass.
///
/// Not `Sync`: a graph and its values belong to one worker. Independent graphs
/// can be built on different threads.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    kinks: RefCell<Option<KinkTrace>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, dim, inner) extents.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `x` (shape `shape`) into the permuted layout.
fn permute_data<T: Copy>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..x.len() {
        out.push(x[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), kinks: RefCell::new(None) }
    }

    /// A graph that records the sign pattern of relu inputs.
    pub fn with_kink_trace() -> Self {
        let g = Self::new();
        *g.kinks.borrow_mut() = Some(KinkTrace { signature: 0xcbf2_9ce4_8422_2325, min_margin: f64::INFINITY });
        g
    }

    pub(crate) fn kink_trace(&self) -> Option<KinkTrace> {
        *self.kinks.borrow()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn push_op(&self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].needs_grad)
        };
        let value = Tensor { shape, data, requires_grad: needs, grad: None };
        self.push(value, op, needs)
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that accumulates gradients during [`Graph::backward`].
    pub fn param(&self, mut t: Tensor<T>) -> Var {
        t.requires_grad = true;
        t.grad = None;
        self.push(t, Op::Leaf, true)
    }

    /// Leaf taking `requires_grad` from the tensor itself.
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    pub fn data(&self, v: Var) -> Vec<T> {
        self.nodes.borrow()[v.0].value.data.clone()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.data[0]
    }

    pub fn grad(&self, v: Var) -> Option<Vec<T>> {
        self.nodes.borrow()[v.0].value.grad.clone()
    }

    pub fn zero_grads(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.value.grad = None;
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product over the last two axes. Leading axes are batch axes; a
    /// rank-2 operand is shared across the other operand's batch.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (layout, mut out_shape) = if bb.is_empty() {
            let rows = numel(ba) * m;
            (MatLayout { batch: 1, m: rows, k, n, a_batched: false, b_batched: false }, ba.to_vec())
        } else if ba.is_empty() {
            (MatLayout { batch: numel(bb), m, k, n, a_batched: false, b_batched: true }, bb.to_vec())
        } else if ba == bb {
            (MatLayout { batch: numel(ba), m, k, n, a_batched: true, b_batched: true }, ba.to_vec())
        } else {
            return Err(Error::shape("matmul", &sa, &sb));
        };
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); numel(&out_shape)];
        {
            let nodes = self.nodes.borrow();
            let (ad, bd) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
            let MatLayout { batch, m, k, n, a_batched, b_batched } = layout;
            for g in 0..batch {
                let ao = if a_batched { g * m * k } else { 0 };
                let bo = if b_batched { g * k * n } else { 0 };
                gemm(m, k, n, &ad[ao..], false, &bd[bo..], false, &mut out[g * m * n..], false);
            }
        }
        Ok(self.push_op(out_shape, out, Op::MatMul { a, b, layout }, &[a, b]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", &self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", &shape, perm));
        }
        let data = permute_data(&self.nodes.borrow()[x.0].value.data, &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        Ok(self.push_op(out_shape, data, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(x);
        if numel(&old) != numel(shape) {
            return Err(Error::shape("reshape", &old, shape));
        }
        let data = self.data(x);
        Ok(self.push_op(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, &sa, &sb));
        }
        Ok(sa)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        let nodes = self.nodes.borrow();
        nodes[a.0].value.data.iter().zip(&nodes[b.0].value.data).map(|(&x, &y)| f(x, y)).collect()
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Vec<T> {
        self.nodes.borrow()[x.0].value.data.iter().map(|&v| f(v)).collect()
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let data = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push_op(shape, data, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let data = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push_op(shape, data, Op::Sub(a, b), &[a, b]))
    }

    /// Hadamard product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let data = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push_op(shape, data, Op::Mul(a, b), &[a, b]))
    }

    /// `x + y` where `y`'s shape is a trailing suffix of `x`'s shape; `y` is
    /// repeated over the leading axes (e.g. a bias vector over rows).
    pub fn add_broadcast(&self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != sy[..] {
            return Err(Error::shape("add_broadcast", &sx, &sy));
        }
        let data = {
            let nodes = self.nodes.borrow();
            let yd = &nodes[y.0].value.data;
            let w = yd.len();
            nodes[x.0].value.data.iter().enumerate().map(|(i, &v)| v + yd[i % w]).collect()
        };
        Ok(self.push_op(sx, data, Op::AddBroadcast { x, y }, &[x, y]))
    }

    /// Elementwise product with a constant of the same size (masks, dropout).
    pub fn mul_const(&self, x: Var, c: Vec<T>) -> Result<Var> {
        let shape = self.shape(x);
        if c.len() != numel(&shape) {
            return Err(Error::shape("mul_const", &shape, &[c.len()]));
        }
        let data = self.nodes.borrow()[x.0].value.data.iter().zip(&c).map(|(&a, &b)| a * b).collect();
        Ok(self.push_op(shape, data, Op::MulConst { x, c }, &[x]))
    }

    pub fn scale(&self, x: Var, s: T) -> Var {
        let data = self.map(x, |v| v * s);
        self.push_op(self.shape(x), data, Op::Scale { x, s }, &[x])
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let data = self.map(x, sigmoid);
        self.push_op(self.shape(x), data, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&self, x: Var) -> Var {
        let data = self.map(x, |v| v.tanh());
        self.push_op(self.shape(x), data, Op::Tanh(x), &[x])
    }

    /// relu with relu'(0) = 0.
    pub fn relu(&self, x: Var) -> Var {
        let data = self.map(x, |v| if v > T::zero() { v } else { T::zero() });
        if let Some(trace) = self.kinks.borrow_mut().as_mut() {
            let nodes = self.nodes.borrow();
            for &v in &nodes[x.0].value.data {
                let bit = (v > T::zero()) as u64;
                trace.signature = (trace.signature ^ bit).wrapping_mul(0x0100_0000_01b3);
                trace.min_margin = trace.min_margin.min(v.abs().to_f64().unwrap_or(0.0));
            }
        }
        self.push_op(self.shape(x), data, Op::Relu(x), &[x])
    }

    // ---- structural -----------------------------------------------------

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first =
            inputs.first().map(|&v| self.shape(v)).ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &first, &s));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = around(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        {
            let nodes = self.nodes.borrow();
            for o in 0..outer {
                for &v in inputs {
                    let t = &nodes[v.0].value;
                    let w = t.shape[axis] * inner;
                    out.extend_from_slice(&t.data[o * w..(o + 1) * w]);
                }
            }
        }
        Ok(self.push_op(out_shape, out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, len]));
        }
        let (outer, dim, inner) = around(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let nodes = self.nodes.borrow();
            let d = &nodes[x.0].value.data;
            for o in 0..outer {
                let base = o * dim * inner + start * inner;
                out.extend_from_slice(&d[base..base + len * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push_op(out_shape, out, Op::Slice { x, axis, start }, &[x]))
    }

    /// `out[.., t, ..] = x[.., t + offset, ..]` along `axis`, zero outside.
    pub fn shift(&self, x: Var, axis: usize, offset: isize) -> Result<Var> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::shape("shift", &shape, &[axis]));
        }
        let (outer, dim, inner) = around(&shape, axis);
        let mut out = vec![T::zero(); numel(&shape)];
        {
            let nodes = self.nodes.borrow();
            shift_into(&nodes[x.0].value.data, &mut out, outer, dim, inner, offset);
        }
        Ok(self.push_op(shape, out, Op::Shift { x, axis, offset }, &[x]))
    }

    // ---- normalisations -------------------------------------------------

    /// Softmax over the last axis. `mask` (same size as `x`, `true` = visible)
    /// forces exact zeros on hidden entries.
    pub fn softmax_masked(&self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x);
        let n = *shape.last().ok_or_else(|| Error::shape("softmax", &shape, &[]))?;
        if let Some(m) = mask {
            if m.len() != numel(&shape) {
                return Err(Error::shape("softmax mask", &shape, &[m.len()]));
            }
        }
        let mut out = vec![T::zero(); numel(&shape)];
        {
            let nodes = self.nodes.borrow();
            let d = &nodes[x.0].value.data;
            for (r, row) in d.chunks(n.max(1)).enumerate() {
                let vis = |j: usize| mask.is_none_or(|m| m[r * n + j]);
                let mut mx = T::neg_infinity();
                for (j, &v) in row.iter().enumerate() {
                    if vis(j) && v > mx {
                        mx = v;
                    }
                }
                if !(0..n).any(vis) {
                    return Err(Error::DegenerateRow { row: r });
                }
                let o = &mut out[r * n..(r + 1) * n];
                if mx == T::neg_infinity() {
                    // every visible entry is NaN or -inf: let NaN propagate
                    o.iter_mut().for_each(|v| *v = T::nan());
                    continue;
                }
                let mut sum = T::zero();
                for (j, &v) in row.iter().enumerate() {
                    if vis(j) {
                        let e = (v - mx).exp();
                        o[j] = e;
                        sum += e;
                    }
                }
                for v in o.iter_mut() {
                    *v /= sum;
                }
            }
        }
        Ok(self.push_op(shape, out, Op::Softmax(x), &[x]))
    }

    /// Normalises the last axis with population variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x);
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[]))?;
        let (sg, sb) = (self.shape(gain), self.shape(bias));
        if sg != [d] || sb != [d] {
            return Err(Error::shape("layer_norm", &shape, &sg));
        }
        let rows = numel(&shape) / d.max(1);
        let mut xhat = vec![T::zero(); numel(&shape)];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); numel(&shape)];
        {
            let nodes = self.nodes.borrow();
            let xd = &nodes[x.0].value.data;
            let (gd, bd) = (&nodes[gain.0].value.data, &nodes[bias.0].value.data);
            let dn = T::from_usize(d).unwrap();
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let rs = T::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gd[j] + bd[j];
                }
            }
        }
        Ok(self.push_op(shape, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Row normalisation `y[i,j] = m[i,j] / (sum_j m[i,j] + eps)` over the last axis.
    pub fn psi_normalize(&self, x: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x);
        let n = *shape.last().ok_or_else(|| Error::shape("psi_normalize", &shape, &[]))?;
        let data = {
            let nodes = self.nodes.borrow();
            let mut out = nodes[x.0].value.data.clone();
            for row in out.chunks_mut(n.max(1)) {
                let s = row.iter().copied().sum::<T>() + eps;
                row.iter_mut().for_each(|v| *v /= s);
            }
            out
        };
        Ok(self.push_op(shape, data, Op::PsiNorm { x, eps }, &[x]))
    }

    // ---- lookups and mixing ---------------------------------------------

    /// Row lookup into a `V x d` table, scaled by `scale`. Output shape is
    /// `ids_shape ++ [d]`.
    pub fn embed(&self, table: Var, ids: &[usize], ids_shape: &[usize], scale: T) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 || numel(ids_shape) != ids.len() {
            return Err(Error::shape("embed", &st, ids_shape));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Vocabulary { id: bad, size: v });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        {
            let nodes = self.nodes.borrow();
            let td = &nodes[table.0].value.data;
            for &i in ids {
                out.extend(td[i * d..(i + 1) * d].iter().map(|&w| w * scale));
            }
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        Ok(self.push_op(shape, out, Op::Embed { table, ids: ids.to_vec(), scale }, &[table]))
    }

    /// `Re(F_hidden(F_seq(x)))` per batch row of a `B x T x d` tensor, using
    /// only the first `lengths[b]` positions; the padded tail is zero.
    pub fn fourier_mix(&self, x: Var, lengths: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 3 || lengths.len() != shape[0] || lengths.iter().any(|&l| l > shape[1]) {
            return Err(Error::shape("fourier_mix", &shape, lengths));
        }
        let data = {
            let nodes = self.nodes.borrow();
            mix_batch(&nodes[x.0].value.data, &shape, lengths)
        };
        Ok(self.push_op(shape, data, Op::FourierMix { x, lengths: lengths.to_vec() }, &[x]))
    }

    // ---- reductions and losses ------------------------------------------

    pub fn sum(&self, x: Var) -> Var {
        let s = self.nodes.borrow()[x.0].value.data.iter().copied().sum::<T>();
        self.push_op(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = T::from_usize(numel(&self.shape(x)).max(1)).unwrap();
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Cross-entropy against the label-smoothed distribution (`1 - gamma` on
    /// the gold class, `gamma / (V - 1)` elsewhere), averaged over rows whose
    /// `mask` entry is true.
    pub fn label_smoothed_ce(&self, logits: Var, targets: &[usize], mask: &[bool], gamma: T) -> Result<Var> {
        let shape = self.shape(logits);
        let v = *shape.last().ok_or_else(|| Error::shape("label_smoothed_ce", &shape, &[]))?;
        let rows = numel(&shape) / v.max(1);
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::shape("label_smoothed_ce", &shape, &[targets.len()]));
        }
        if v < 2 {
            return Err(Error::Contract("label smoothing needs at least two classes".into()));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        let off = gamma / T::from_usize(v - 1).unwrap();
        let on = T::one() - gamma;
        let mut probs = vec![T::zero(); rows * v];
        let mut total = T::zero();
        {
            let nodes = self.nodes.borrow();
            let d = &nodes[logits.0].value.data;
            for r in 0..rows {
                if !mask[r] {
                    continue;
                }
                let tgt = targets[r];
                if tgt >= v {
                    return Err(Error::Vocabulary { id: tgt, size: v });
                }
                let row = &d[r * v..(r + 1) * v];
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut se = T::zero();
                for (j, &x) in row.iter().enumerate() {
                    let e = (x - mx).exp();
                    probs[r * v + j] = e;
                    se += e;
                }
                for p in &mut probs[r * v..(r + 1) * v] {
                    *p /= se;
                }
                let lse = mx + se.ln();
                let sum: T = row.iter().copied().sum();
                total += lse - (on * row[tgt] + off * (sum - row[tgt]));
            }
        }
        let loss = total / T::from_usize(count).unwrap();
        Ok(self.push_op(
            Vec::new(),
            vec![loss],
            Op::SmoothedCe { logits, targets: targets.to_vec(), mask: mask.to_vec(), gamma, probs, count },
            &[logits],
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients are added onto the
    /// `grad` field of every reachable leaf that requires them, so repeated
    /// calls accumulate.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let ls = &nodes[loss.0].value;
        if ls.data.len() != 1 {
            return Err(Error::NonScalarLoss(ls.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(&nodes, i, &g, &mut grads);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut nodes[i];
                if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                    match node.value.grad.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        None => node.value.grad = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

fn shift_into<T: Scalar>(src: &[T], dst: &mut [T], outer: usize, dim: usize, inner: usize, offset: isize) {
    for o in 0..outer {
        for t in 0..dim {
            let s = t as isize + offset;
            if s < 0 || s >= dim as isize {
                continue;
            }
            let s = s as usize;
            let (di, si) = ((o * dim + t) * inner, (o * dim + s) * inner);
            for j in 0..inner {
                dst[di + j] += src[si + j];
            }
        }
    }
}

fn mix_batch<T: Scalar>(x: &[T], shape: &[usize], lengths: &[usize]) -> Vec<T> {
    let (t, d) = (shape[1], shape[2]);
    let mut out = vec![T::zero(); x.len()];
    for (b, &len) in lengths.iter().enumerate() {
        let base = b * t * d;
        let mixed = fourier_mix(&x[base..base + len * d], len, d);
        out[base..base + len * d].copy_from_slice(&mixed);
    }
    out
}

fn acc<'g, T: Scalar>(nodes: &[Node<T>], grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.data.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn propagate<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul { a, b, layout } => {
            let MatLayout { batch, m, k, n, a_batched, b_batched } = *layout;
            let ad = &nodes[a.0].value.data;
            let bd = &nodes[b.0].value.data;
            if let Some(ga) = acc(nodes, grads, *a) {
                for bi in 0..batch {
                    let ao = if a_batched { bi * m * k } else { 0 };
                    let bo = if b_batched { bi * k * n } else { 0 };
                    // dA = dC · Bᵀ
                    gemm(m, n, k, &g[bi * m * n..], false, &bd[bo..], true, &mut ga[ao..], true);
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for bi in 0..batch {
                    let ao = if a_batched { bi * m * k } else { 0 };
                    let bo = if b_batched { bi * k * n } else { 0 };
                    // dB = Aᵀ · dC
                    gemm(k, m, n, &ad[ao..], true, &g[bi * m * n..], false, &mut gb[bo..], true);
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
            if let Some(ga) = acc(nodes, grads, *a) {
                for j in 0..g.len() {
                    ga[j] += g[j] * bd[j];
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for j in 0..g.len() {
                    gb[j] += g[j] * ad[j];
                }
            }
        }
        Op::AddBroadcast { x, y } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
            if let Some(gy) = acc(nodes, grads, *y) {
                let w = gy.len();
                for (j, &v) in g.iter().enumerate() {
                    gy[j % w] += v;
                }
            }
        }
        Op::MulConst { x, c } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for j in 0..g.len() {
                    gx[j] += g[j] * c[j];
                }
            }
        }
        Op::Scale { x, s } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *s);
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for j in 0..g.len() {
                    let y = out.data[j];
                    gx[j] += g[j] * y * (T::one() - y);
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for j in 0..g.len() {
                    let y = out.data[j];
                    gx[j] += g[j] * (T::one() - y * y);
                }
            }
        }
        Op::Relu(x) => {
            let xd = &nodes[x.0].value.data;
            if let Some(gx) = acc(nodes, grads, *x) {
                for j in 0..g.len() {
                    if xd[j] > T::zero() {
                        gx[j] += g[j];
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = around(&out.shape, *axis);
            let mut offset = 0;
            let row = out.shape[*axis] * inner;
            for &v in inputs {
                let w = nodes[v.0].value.shape[*axis] * inner;
                if let Some(gv) = acc(nodes, grads, v) {
                    for o in 0..outer {
                        let src = &g[o * row + offset..o * row + offset + w];
                        gv[o * w..(o + 1) * w].iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                    }
                }
                offset += w;
            }
        }
        Op::Slice { x, axis, start } => {
            let in_shape = &nodes[x.0].value.shape;
            let (outer, dim, inner) = around(in_shape, *axis);
            let len = out.shape[*axis];
            if let Some(gx) = acc(nodes, grads, *x) {
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    gx[base..base + len * inner].iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                }
            }
        }
        Op::Permute { x, perm } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, &out.shape, &inv);
                gx.iter_mut().zip(&back).for_each(|(a, &b)| *a += b);
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
        Op::Softmax(x) => {
            let n = *out.shape.last().unwrap();
            if let Some(gx) = acc(nodes, grads, *x) {
                for r in 0..g.len() / n.max(1) {
                    let (y, gr) = (&out.data[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] += y[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let d = *out.shape.last().unwrap();
            let rows = g.len() / d.max(1);
            let gd = &nodes[gain.0].value.data;
            if let Some(gg) = acc(nodes, grads, *gain) {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *bias) {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            }
            if let Some(gx) = acc(nodes, grads, *x) {
                let dn = T::from_usize(d).unwrap();
                for r in 0..rows {
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        let dh = g[r * d + j] * gd[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[r * d + j];
                    }
                    mean_dh /= dn;
                    mean_dh_h /= dn;
                    for j in 0..d {
                        let dh = g[r * d + j] * gd[j];
                        gx[r * d + j] += rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                    }
                }
            }
        }
        Op::Embed { table, ids, scale } => {
            let d = *out.shape.last().unwrap();
            if let Some(gt) = acc(nodes, grads, *table) {
                for (p, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[p * d + j] * *scale;
                    }
                }
            }
        }
        Op::Shift { x, axis, offset } => {
            let (outer, dim, inner) = around(&out.shape, *axis);
            if let Some(gx) = acc(nodes, grads, *x) {
                shift_into(g, gx, outer, dim, inner, -offset);
            }
        }
        Op::PsiNorm { x, eps } => {
            let n = *out.shape.last().unwrap();
            let xd = &nodes[x.0].value.data;
            if let Some(gx) = acc(nodes, grads, *x) {
                for r in 0..g.len() / n.max(1) {
                    let row = &xd[r * n..(r + 1) * n];
                    let s = row.iter().copied().sum::<T>() + *eps;
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: T = gr.iter().zip(row).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] += gr[j] / s - dot / (s * s);
                    }
                }
            }
        }
        Op::FourierMix { x, lengths } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let back = mix_batch(g, &out.shape, lengths);
                gx.iter_mut().zip(&back).for_each(|(a, &b)| *a += b);
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::SmoothedCe { logits, targets, mask, gamma, probs, count } => {
            let v = *nodes[logits.0].value.shape.last().unwrap();
            let off = *gamma / T::from_usize(v - 1).unwrap();
            let on = T::one() - *gamma;
            let w = g[0] / T::from_usize(*count).unwrap();
            if let Some(gl) = acc(nodes, grads, *logits) {
                for (r, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..v {
                        let q = if j == targets[r] { on } else { off };
                        gl[r * v + j] += w * (probs[r * v + j] - q);
                    }
                }
            }
        }
    }
}
