//! Tape-based reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and, when any input needs a gradient, enough
//! saved state to run its adjoint. [`Tape::backward`] consumes the tape and
//! returns a [`Gradients`] table; parameter gradients are then folded into a
//! [`ParameterSet`] with [`Gradients::apply_to`].
//!
//! Matrices are row-major `[rows, cols]`. Broadcasting is limited to
//! scalar-vs-tensor in `add`/`mul` plus the explicit row-bias op.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParameterSet, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Packing of a batch of padded sequences into `[batch * seq_len, width]` rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    /// Valid (unpadded) length of each sequence.
    pub lengths: Vec<usize>,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, S),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<Option<usize>>,
    },
    Concat(Vec<Var>),
    SelectRows {
        mask: Vec<bool>,
        on: Var,
        off: Var,
    },
    Sum(Var),
    Mean(Var),
    Dropout {
        x: Var,
        mask: Vec<S>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
}

#[derive(Debug)]
struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Records operations of one forward pass.
#[derive(Debug)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    bound: HashMap<String, Var>,
    param_nodes: Vec<(String, Var)>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(op, shape, &[0, 0])),
    }
}

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    // tanh approximation
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let a = S::of(0.044715);
    let half = S::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (S::one() + t);
    let dy = half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * a * x * x);
    (y, dy)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            param_nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node invariant")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Attention probabilities saved by an attention node, laid out `[batch, heads, seq, seq]`.
    /// Only nodes that take part in differentiation keep them.
    pub fn attention_weights(&self, v: Var) -> Option<&[S]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; it is differentiated iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape,
            value: tensor.data,
            op: Op::Leaf,
            needs_grad: tensor.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    /// Binds a named parameter as a leaf. Repeated calls return the same node.
    pub fn param(&mut self, params: &ParameterSet<S>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = params.get(name)?;
        let v = self.leaf(Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            requires_grad: t.requires_grad,
            grad: None,
        });
        self.bound.insert(name.to_string(), v);
        self.param_nodes.push((name.to_string(), v));
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims2(self.shape(a), "matmul")?;
        let (k2, m) = dims2(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == S::zero() {
                    continue;
                }
                let brow = &bv[p * m..(p + 1) * m];
                for (o, &bj) in orow.iter_mut().zip(brow) {
                    *o += aip * bj;
                }
            }
        }
        Ok(self.push(vec![n, m], out, Op::MatMul(a, b), &[a, b]))
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(S, S) -> S,
    ) -> Result<(Vec<usize>, Vec<S>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (va, vb) = (self.value(a), self.value(b));
        if sa == sb {
            Ok((sa, va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()))
        } else if vb.len() == 1 {
            Ok((sa, va.iter().map(|&x| f(x, vb[0])).collect()))
        } else if va.len() == 1 {
            Ok((sb, vb.iter().map(|&y| f(va[0], y)).collect()))
        } else {
            Err(Error::shape(op_name, &sa, &sb))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(shape, out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(shape, out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(shape, out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[cols]` bias to every row of a `[rows, cols]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(x), "add_bias")?;
        if self.value(bias).len() != c {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let bv = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        Ok(self.push(vec![r, c], out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Scale(x, c), &[x]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        Ok(self.unary(x, |v| S::one() / (S::one() + (-v).exp()), Op::Sigmoid(x)))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        Ok(self.unary(x, |v| v.tanh(), Op::Tanh(x)))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        Ok(self.unary(x, |v| gelu_parts(v).0, Op::Gelu(x)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::shape("softmax", &shape, &[1]))?;
        let mut out = self.value(x).to_vec();
        if c > 0 {
            for row in out.chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        Ok(self.push(shape, out, Op::Softmax(x), &[x]))
    }

    /// Row-wise layer normalisation with learned `[cols]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = dims2(self.shape(x), "layer_norm")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = S::of(eps);
        let n = S::of(c as f64);
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![S::zero(); r * c];
        let mut rstd = vec![S::zero(); r];
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let rs = S::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push(
            vec![r, c],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Looks up rows of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, dim) = dims2(self.shape(table), "embedding")?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(Error::OutOfRange {
                    what: "embedding table",
                    index: id,
                    len: rows,
                });
            }
            out.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        Ok(self.push(
            vec![ids.len(), dim],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Gathers rows of `x`; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, idx: &[Option<usize>]) -> Result<Var> {
        let (rows, c) = dims2(self.shape(x), "gather_rows")?;
        let xv = self.value(x);
        let mut out = vec![S::zero(); idx.len() * c];
        for (o, id) in idx.iter().enumerate() {
            if let Some(i) = *id {
                if i >= rows {
                    return Err(Error::OutOfRange {
                        what: "gather_rows",
                        index: i,
                        len: rows,
                    });
                }
                out[o * c..(o + 1) * c].copy_from_slice(&xv[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(
            vec![idx.len(), c],
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Concatenates 2-D tensors along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Empty("concat inputs".into()))?;
        let (r, _) = dims2(self.shape(first), "concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2(self.shape(p), "concat")?;
            if pr != r {
                return Err(Error::shape("concat", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![r, total], out, Op::Concat(parts.to_vec()), parts))
    }

    /// Row-wise choice: row `i` comes from `on` when `mask[i]`, else from `off`.
    pub fn select_rows(&mut self, mask: &[bool], on: Var, off: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(on), "select_rows")?;
        if self.shape(on) != self.shape(off) || mask.len() != r {
            return Err(Error::shape("select_rows", self.shape(on), self.shape(off)));
        }
        let mut out = self.value(off).to_vec();
        let onv = self.value(on);
        for (i, &m) in mask.iter().enumerate() {
            if m {
                out[i * c..(i + 1) * c].copy_from_slice(&onv[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(
            vec![r, c],
            out,
            Op::SelectRows {
                mask: mask.to_vec(),
                on,
                off,
            },
            &[on, off],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        Ok(self.push(Vec::new(), vec![s], Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::Empty("mean of empty tensor".into()));
        }
        let s = v.iter().copied().sum::<S>() / S::of(v.len() as f64);
        Ok(self.push(Vec::new(), vec![s], Op::Mean(x), &[x]))
    }

    /// Inverted dropout. A rate of zero returns `x` unchanged.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::Config(format!("dropout rate {rate} must be < 1")));
        }
        let keep = S::of(1.0 / (1.0 - rate));
        let mask: Vec<S> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { S::zero() } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Dropout { x, mask }, &[x]))
    }

    /// Multi-head scaled dot-product attention over packed, padded sequences.
    ///
    /// `q`, `k`, `v` are `[batch * seq_len, width]`. Keys past each sequence's
    /// length are masked; padded query rows produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: &AttentionLayout) -> Result<Var> {
        let (rows, width) = dims2(self.shape(q), "attention")?;
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        let AttentionLayout {
            batch,
            seq_len,
            heads,
            ref lengths,
        } = *layout;
        if rows != batch * seq_len
            || heads == 0
            || width % heads != 0
            || lengths.len() != batch
            || lengths.iter().any(|&l| l > seq_len)
        {
            return Err(Error::shape("attention", &[rows, width], &[batch, seq_len, heads]));
        }
        let dh = width / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![S::zero(); rows * width];
        let mut probs = vec![S::zero(); batch * heads * seq_len * seq_len];
        let mut scores = vec![S::zero(); seq_len];
        for b in 0..batch {
            let len = lengths[b];
            for h in 0..heads {
                for i in 0..len {
                    let qrow = &qv[(b * seq_len + i) * width + h * dh..][..dh];
                    for j in 0..len {
                        let krow = &kv[(b * seq_len + j) * width + h * dh..][..dh];
                        scores[j] = dot(qrow, krow) * scale;
                    }
                    softmax_in_place(&mut scores[..len]);
                    let pbase = ((b * heads + h) * seq_len + i) * seq_len;
                    probs[pbase..pbase + len].copy_from_slice(&scores[..len]);
                    let orow = &mut out[(b * seq_len + i) * width + h * dh..][..dh];
                    for j in 0..len {
                        let vrow = &vv[(b * seq_len + j) * width + h * dh..][..dh];
                        let p = scores[j];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            vec![rows, width],
            out,
            Op::Attention {
                q,
                k,
                v,
                layout: layout.clone(),
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = dims2(self.shape(logits), "cross_entropy")?;
        if labels.len() != b || b == 0 {
            return Err(Error::shape("cross_entropy", &[b, c], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::OutOfRange {
                what: "class labels",
                index: bad,
                len: c,
            });
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = S::zero();
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            loss += lse - row[y];
            softmax_in_place(row);
        }
        loss /= S::of(b as f64);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Runs reverse-mode differentiation from a scalar loss, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        let Tape {
            nodes, param_nodes, ..
        } = self;
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![S::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(&nodes, &mut grads, node, &g);
        }
        Ok(Gradients { grads, param_nodes })
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn accum<'a, S: Scalar>(
    nodes: &[Node<S>],
    grads: &'a mut [Option<Vec<S>>],
    v: Var,
) -> Option<&'a mut Vec<S>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); node.value.len()]))
}

/// Adds `g` into the gradient of a binary-op operand, summing when the operand was a broadcast scalar.
fn accum_broadcast<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    v: Var,
    g: impl Iterator<Item = S>,
) {
    let len = nodes[v.0].value.len();
    if let Some(dst) = accum(nodes, grads, v) {
        if len == 1 {
            dst[0] += g.sum::<S>();
        } else {
            for (d, x) in dst.iter_mut().zip(g) {
                *d += x;
            }
        }
    }
}

fn operand<S: Scalar>(nodes: &[Node<S>], v: Var, i: usize) -> S {
    let val = &nodes[v.0].value;
    if val.len() == 1 {
        val[0]
    } else {
        val[i]
    }
}

fn propagate<S: Scalar>(nodes: &[Node<S>], grads: &mut [Option<Vec<S>>], node: &Node<S>, g: &[S]) {
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (n, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let m = nodes[b.0].shape[1];
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if let Some(da) = accum(nodes, grads, *a) {
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        da[i * k + p] += dot(grow, &bv[p * m..(p + 1) * m]);
                    }
                }
            }
            if let Some(db) = accum(nodes, grads, *b) {
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == S::zero() {
                            continue;
                        }
                        for (d, &gj) in db[p * m..(p + 1) * m].iter_mut().zip(grow) {
                            *d += aip * gj;
                        }
                    }
                }
            }
        }
        Op::Add(a, b) => {
            accum_broadcast(nodes, grads, *a, g.iter().copied());
            accum_broadcast(nodes, grads, *b, g.iter().copied());
        }
        Op::Sub(a, b) => {
            accum_broadcast(nodes, grads, *a, g.iter().copied());
            accum_broadcast(nodes, grads, *b, g.iter().map(|&x| -x));
        }
        Op::Mul(a, b) => {
            let ga: Vec<S> = g
                .iter()
                .enumerate()
                .map(|(i, &gi)| gi * operand(nodes, *b, i))
                .collect();
            let gb: Vec<S> = g
                .iter()
                .enumerate()
                .map(|(i, &gi)| gi * operand(nodes, *a, i))
                .collect();
            accum_broadcast(nodes, grads, *a, ga.into_iter());
            accum_broadcast(nodes, grads, *b, gb.into_iter());
        }
        Op::AddBias(x, bias) => {
            if let Some(dx) = accum(nodes, grads, *x) {
                for (d, &gi) in dx.iter_mut().zip(g) {
                    *d += gi;
                }
            }
            let c = nodes[bias.0].value.len();
            if let Some(db) = accum(nodes, grads, *bias) {
                for row in g.chunks(c) {
                    for (d, &gi) in db.iter_mut().zip(row) {
                        *d += gi;
                    }
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(dx) = accum(nodes, grads, *x) {
                for (d, &gi) in dx.iter_mut().zip(g) {
                    *d += gi * *c;
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(dx) = accum(nodes, grads, *x) {
                for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                    *d += gi * yi * (S::one() - yi);
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(dx) = accum(nodes, grads, *x) {
                for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                    *d += gi * (S::one() - yi * yi);
                }
            }
        }
        Op::Gelu(x) => {
            let xv = &nodes[x.0].value;
            if let Some(dx) = accum(nodes, grads, *x) {
                for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                    *d += gi * gelu_parts(xi).1;
                }
            }
        }
        Op::Softmax(x) => {
            let c = *node.shape.last().unwrap_or(&1);
            if let Some(dx) = accum(nodes, grads, *x) {
                for ((drow, grow), yrow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let s = dot(grow, yrow);
                    for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yi * (gi - s);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = node.shape[1];
            let gv = &nodes[gamma.0].value;
            if let Some(dg) = accum(nodes, grads, *gamma) {
                for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for ((d, &gi), &hi) in dg.iter_mut().zip(grow).zip(hrow) {
                        *d += gi * hi;
                    }
                }
            }
            if let Some(db) = accum(nodes, grads, *beta) {
                for grow in g.chunks(c) {
                    for (d, &gi) in db.iter_mut().zip(grow) {
                        *d += gi;
                    }
                }
            }
            if let Some(dx) = accum(nodes, grads, *x) {
                let n = S::of(c as f64);
                for (r, (grow, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                    let dxhat: Vec<S> = grow.iter().zip(gv).map(|(&gi, &gm)| gi * gm).collect();
                    let mean_d = dxhat.iter().copied().sum::<S>() / n;
                    let mean_dh = dot(&dxhat, hrow) / n;
                    for j in 0..c {
                        dx[r * c + j] += rstd[r] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let dim = nodes[table.0].shape[1];
            if let Some(dt) = accum(nodes, grads, *table) {
                for (o, &id) in ids.iter().enumerate() {
                    for (d, &gi) in dt[id * dim..(id + 1) * dim].iter_mut().zip(&g[o * dim..(o + 1) * dim]) {
                        *d += gi;
                    }
                }
            }
        }
        Op::GatherRows { x, idx } => {
            let c = node.shape[1];
            if let Some(dx) = accum(nodes, grads, *x) {
                for (o, id) in idx.iter().enumerate() {
                    if let Some(i) = *id {
                        for (d, &gi) in dx[i * c..(i + 1) * c].iter_mut().zip(&g[o * c..(o + 1) * c]) {
                            *d += gi;
                        }
                    }
                }
            }
        }
        Op::Concat(parts) => {
            let (r, total) = (node.shape[0], node.shape[1]);
            let mut offset = 0;
            for p in parts {
                let w = nodes[p.0].shape[1];
                if let Some(dp) = accum(nodes, grads, *p) {
                    for i in 0..r {
                        for (d, &gi) in dp[i * w..(i + 1) * w]
                            .iter_mut()
                            .zip(&g[i * total + offset..i * total + offset + w])
                        {
                            *d += gi;
                        }
                    }
                }
                offset += w;
            }
        }
        Op::SelectRows { mask, on, off } => {
            let c = node.shape[1];
            for (target, want) in [(on, true), (off, false)] {
                if let Some(dt) = accum(nodes, grads, *target) {
                    for (i, &m) in mask.iter().enumerate() {
                        if m == want {
                            for (d, &gi) in dt[i * c..(i + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]) {
                                *d += gi;
                            }
                        }
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = accum(nodes, grads, *x) {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean(x) => {
            if let Some(dx) = accum(nodes, grads, *x) {
                let share = g[0] / S::of(dx.len() as f64);
                for d in dx.iter_mut() {
                    *d += share;
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(dx) = accum(nodes, grads, *x) {
                for ((d, &gi), &m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            layout,
            probs,
        } => attention_backward(nodes, grads, node, g, (*q, *k, *v), layout, probs),
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let c = nodes[logits.0].shape[1];
            let b = labels.len();
            if let Some(dl) = accum(nodes, grads, *logits) {
                let w = g[0] / S::of(b as f64);
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let target = if j == y { S::one() } else { S::zero() };
                        dl[r * c + j] += w * (probs[r * c + j] - target);
                    }
                }
            }
        }
    }
}

fn attention_backward<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    node: &Node<S>,
    g: &[S],
    (q, k, v): (Var, Var, Var),
    layout: &AttentionLayout,
    probs: &[S],
) {
    let width = node.shape[1];
    let AttentionLayout {
        batch,
        seq_len,
        heads,
        ref lengths,
    } = *layout;
    let dh = width / heads;
    let scale = S::one() / S::of(dh as f64).sqrt();
    let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
    let n = qv.len();
    let mut dq = vec![S::zero(); n];
    let mut dk = vec![S::zero(); n];
    let mut dv = vec![S::zero(); n];
    let mut dp = vec![S::zero(); seq_len];
    for b in 0..batch {
        let len = lengths[b];
        for h in 0..heads {
            for i in 0..len {
                let qoff = (b * seq_len + i) * width + h * dh;
                let go = &g[qoff..qoff + dh];
                let p = &probs[((b * heads + h) * seq_len + i) * seq_len..][..len];
                for j in 0..len {
                    let voff = (b * seq_len + j) * width + h * dh;
                    dp[j] = dot(go, &vv[voff..voff + dh]);
                    for (d, &x) in dv[voff..voff + dh].iter_mut().zip(go) {
                        *d += p[j] * x;
                    }
                }
                let s = dot(&dp[..len], p);
                for j in 0..len {
                    let ds = p[j] * (dp[j] - s) * scale;
                    if ds == S::zero() {
                        continue;
                    }
                    let koff = (b * seq_len + j) * width + h * dh;
                    for t in 0..dh {
                        dq[qoff + t] += ds * kv[koff + t];
                        dk[koff + t] += ds * qv[qoff + t];
                    }
                }
            }
        }
    }
    for (target, src) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(d) = accum(nodes, grads, target) {
            for (a, b) in d.iter_mut().zip(src) {
                *a += b;
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    param_nodes: Vec<(String, Var)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to a leaf, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulates gradients of bound parameters into `params`. Parameters
    /// the loss did not reach are left untouched.
    pub fn apply_to(&self, params: &mut ParameterSet<S>) -> Result<()> {
        for (name, v) in &self.param_nodes {
            let Some(g) = self.wrt(*v) else { continue };
            let t = params.get_mut(name)?;
            if t.numel() != g.len() {
                return Err(Error::shape("apply_to", &t.shape, &[g.len()]));
            }
            match &mut t.grad {
                Some(existing) => {
                    for (e, &x) in existing.iter_mut().zip(g) {
                        *e += x;
                    }
                }
                None => t.grad = Some(g.to_vec()),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let i = tape.leaf(t(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = tape.leaf(t(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_against_triple_loop() {
        let a = [[1.0, 2.0], [3.0, 4.0]];
        let b = [[5.0, 6.0], [7.0, 8.0]];
        let mut naive = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..2 {
                    naive[i][j] += a[i][p] * b[p][j];
                }
            }
        }
        assert_eq!(naive, [[19.0, 22.0], [43.0, 50.0]]);
        let mut tape = Tape::<f64>::new();
        let av = tape.leaf(t(&[a[0].to_vec(), a[1].to_vec()]));
        let bv = tape.leaf(t(&[b[0].to_vec(), b[1].to_vec()]));
        let c = tape.matmul(av, bv).unwrap();
        assert_eq!(tape.value(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[vec![0.0, 0.0, 0.0]]));
        let y = tape.softmax(x).unwrap();
        for &p in tape.value(y) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn square_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_grad());
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sigmoid_grad_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(0.0).with_grad());
        let y = tape.sigmoid(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[0.25]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]).with_grad());
        let y = tape.tanh(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreached_params_keep_their_grad() {
        let mut params = ParameterSet::<f64>::new();
        params.insert("a", Tensor::scalar(2.0));
        params.insert("b", Tensor::scalar(5.0));
        params.get_mut("b").unwrap().grad = Some(vec![7.0]);
        let mut tape = Tape::new();
        let a = tape.param(&params, "a").unwrap();
        let _b = tape.param(&params, "b").unwrap();
        let y = tape.mul(a, a).unwrap();
        let g = tape.backward(y).unwrap();
        g.apply_to(&mut params).unwrap();
        assert_eq!(params.get("a").unwrap().grad.as_deref(), Some(&[4.0][..]));
        assert_eq!(params.get("b").unwrap().grad.as_deref(), Some(&[7.0][..]));
    }

    #[test]
    fn scalar_broadcast_in_mul() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[vec![1.0, 2.0, 3.0]]).with_grad());
        let c = tape.leaf(Tensor::scalar(2.0).with_grad());
        let y = tape.mul(x, c).unwrap();
        assert_eq!(tape.value(y), &[2.0, 4.0, 6.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(c).unwrap(), &[6.0]);
        assert_eq!(g.wrt(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn layer_norm_statistics() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[vec![1.0, 5.0, -2.0, 0.5], vec![10.0, 11.0, 9.0, 10.5]]));
        let g = tape.leaf(t(&[vec![1.0; 4]]));
        let b = tape.leaf(t(&[vec![0.0; 4]]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        for row in tape.value(y).chunks(4) {
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_token_attention_is_self() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[vec![0.3, -1.0, 2.0, 0.1]]).with_grad());
        let layout = AttentionLayout {
            batch: 1,
            seq_len: 1,
            heads: 2,
            lengths: vec![1],
        };
        let y = tape.attention(x, x, x, &layout).unwrap();
        assert_eq!(tape.attention_weights(y).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn embedding_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(Tensor::zeros(vec![3, 2]));
        assert!(matches!(
            tape.embedding(table, &[3]),
            Err(Error::OutOfRange { index: 3, len: 3, .. })
        ));
    }
}
