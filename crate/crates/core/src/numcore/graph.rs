//! Reverse-mode differentiation over a recorded tape.
//!
//! Every operation appends a node holding its value and the op that produced
//! it. [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients additively, so a value used twice receives both contributions.
//! The tape is dropped with the graph after each step.

use std::borrow::Cow;

use super::ops::{
    col2im_add, conv1d_out_len, im2col, log_softmax_in_place, softmax_prefix_in_place,
};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScalarMul(Var, Var),
    Tanh(Var),
    Silu(Var),
    RmsNorm { x: Var, gain: Var, eps: f64 },
    Softmax(Var),
    LogSoftmax(Var),
    Embedding { table: Var, ids: Vec<usize> },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Conv1d { x: Var, kernel: Var, stride: usize, padding: usize },
    Sum(Var),
    NllSum { logp: Var, targets: Vec<usize>, ignore: Vec<bool> },
}

struct Node<'a, S: Real> {
    value: Cow<'a, Tensor<S>>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<S> {
    slots: Vec<Option<Vec<S>>>,
}

impl<S: Real> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.slots.get(v.0).and_then(|g| g.as_deref())
    }
}

/// A recorded computation.
pub struct Graph<'a, S: Real> {
    nodes: Vec<Node<'a, S>>,
}

impl<S: Real> Default for Graph<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims(t: &Tensor<impl Real>) -> Result<(usize, usize)> {
    t.dims2()
}

impl<'a, S: Real> Graph<'a, S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an owned leaf.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a borrowed leaf (parameters are not copied onto the tape).
    pub fn leaf_ref(&mut self, value: &'a Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].value.shape()[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// `a·b`, or `a·bᵀ` when `trans_b`.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = dims(self.value(a))?;
        let (br, bc) = dims(self.value(b))?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::arg(format!(
                "matmul inner dimensions differ: {:?} x {:?}{}",
                self.shape(a),
                self.shape(b),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            S::zero(),
            &mut out,
        );
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, true)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::arg(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = dims(self.value(a))?;
        if self.value(bias).numel() != n {
            return Err(Error::arg(format!(
                "bias of {} values for rows of width {n}",
                self.value(bias).numel()
            )));
        }
        let b = self.value(bias).data();
        let data: Vec<S> = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = S::lit(c);
        let data = self.value(a).data().iter().map(|&x| x * k).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Scale(a, c), &[a]))
    }

    /// Broadcast product of a single-element tensor `s` with `x`.
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        let k = self.value(s).item()?;
        let data = self.value(x).data().iter().map(|&v| k * v).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::ScalarMul(s, x), &[s, x]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|v| v.tanh()).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Tanh(a), &[a]))
    }

    /// `x·σ(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&v| v * sigmoid(v)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Silu(a), &[a]))
    }

    /// Row-wise RMS normalisation with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (_, n) = dims(self.value(x))?;
        if self.value(gain).numel() != n {
            return Err(Error::arg("rms_norm gain width mismatch"));
        }
        let g = self.value(gain).data();
        let e = S::lit(eps);
        let inv_n = S::lit(1.0 / n as f64);
        let mut data = Vec::with_capacity(self.value(x).numel());
        for row in self.value(x).data().chunks(n) {
            let ms: S = row.iter().map(|&v| v * v).sum::<S>() * inv_n;
            let inv = (ms + e).sqrt().recip();
            data.extend(row.iter().zip(g).map(|(&v, &w)| v * inv * w));
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::RmsNorm { x, gain, eps }, &[x, gain]))
    }

    /// Row-wise softmax; with `causal`, row `i` only sees columns `0..=i`.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (_, n) = dims(self.value(x))?;
        let mut data = self.value(x).data().to_vec();
        for (i, row) in data.chunks_mut(n).enumerate() {
            let limit = if causal { (i + 1).min(n) } else { n };
            softmax_prefix_in_place(row, limit);
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::Softmax(x), &[x]))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = dims(self.value(x))?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            log_softmax_in_place(row);
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::LogSoftmax(x), &[x]))
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims(self.value(table))?;
        if ids.is_empty() {
            return Err(Error::arg("embedding lookup of an empty sequence"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::arg(format!("token id {id} outside table of {v}")));
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let t = Tensor::matrix(ids.len(), d, data)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = dims(self.value(x))?;
        if start >= end || end > m {
            return Err(Error::arg(format!("row slice {start}..{end} of {m} rows")));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let t = Tensor::matrix(end - start, n, data)?;
        Ok(self.push(t, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = dims(self.value(parts[0]))?.1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = dims(self.value(p))?;
            if pn != n {
                return Err(Error::arg("concat_rows width mismatch"));
            }
            m += pm;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::matrix(m, n, data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = dims(self.value(x))?;
        if start >= end || end > n {
            return Err(Error::arg(format!("column slice {start}..{end} of {n}")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for row in self.value(x).data().chunks(n) {
            data.extend_from_slice(&row[start..end]);
        }
        let t = Tensor::matrix(m, w, data)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = dims(self.value(parts[0]))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = dims(self.value(p))?;
            if pm != m {
                return Err(Error::arg("concat_cols height mismatch"));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::matrix(m, n, data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let t = super::ops::conv1d(self.value(x), self.value(kernel), stride, padding)?;
        Ok(self.push(
            t,
            Op::Conv1d {
                x,
                kernel,
                stride,
                padding,
            },
            &[x, kernel],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: S = self.value(x).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    /// Summed negative log-likelihood of `targets` under row-wise
    /// log-probabilities, skipping `ignore`d positions.
    pub fn nll_sum(&mut self, logp: Var, targets: &[usize], ignore: &[bool]) -> Result<Var> {
        let (m, v) = dims(self.value(logp))?;
        if targets.len() != m || ignore.len() != m {
            return Err(Error::arg(format!(
                "{m} rows but {} targets / {} mask flags",
                targets.len(),
                ignore.len()
            )));
        }
        let mut total = S::zero();
        for (i, (&t, &skip)) in targets.iter().zip(ignore).enumerate() {
            if skip {
                continue;
            }
            if t >= v {
                return Err(Error::arg(format!("target {t} outside vocabulary of {v}")));
            }
            total -= self.value(logp).row(i)[t];
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::NllSum {
                logp,
                targets: targets.to_vec(),
                ignore: ignore.to_vec(),
            },
            &[logp],
        ))
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut slots: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = slots[idx].take() else { continue };
            self.backward_node(idx, &g, &mut slots)?;
            slots[idx] = Some(g);
        }
        Ok(Grads { slots })
    }

    fn backward_node(&self, idx: usize, g: &[S], slots: &mut [Option<Vec<S>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = dims(self.value(*a))?;
                let n = node.value.shape()[1];
                if self.needs_grad(*a) {
                    let ga = slot(slots, *a, m * k);
                    // ga += g·bᵀ (or g·b when b was used transposed)
                    S::gemm(m, n, k, S::one(), g, false, self.value(*b).data(), !trans_b, S::one(), ga);
                }
                if self.needs_grad(*b) {
                    let gb = slot(slots, *b, k * n);
                    if *trans_b {
                        S::gemm(n, m, k, S::one(), g, true, self.value(*a).data(), false, S::one(), gb);
                    } else {
                        S::gemm(k, m, n, S::one(), self.value(*a).data(), true, g, false, S::one(), gb);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs_grad(v) {
                        add_into(slot(slots, v, g.len()), g);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if self.needs_grad(*a) {
                    add_into(slot(slots, *a, g.len()), g);
                }
                if self.needs_grad(*bias) {
                    let n = self.value(*bias).numel();
                    let gb = slot(slots, *bias, n);
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    let bv = self.value(*b).data();
                    let ga = slot(slots, *a, g.len());
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if self.needs_grad(*b) {
                    let av = self.value(*a).data();
                    let gb = slot(slots, *b, g.len());
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.needs_grad(*a) {
                    let k = S::lit(*c);
                    for (o, &gi) in slot(slots, *a, g.len()).iter_mut().zip(g) {
                        *o += gi * k;
                    }
                }
            }
            Op::ScalarMul(s, x) => {
                let xv = self.value(*x).data();
                if self.needs_grad(*s) {
                    let dot: S = g.iter().zip(xv).map(|(&a, &b)| a * b).sum();
                    slot(slots, *s, 1)[0] += dot;
                }
                if self.needs_grad(*x) {
                    let k = self.value(*s).data()[0];
                    for (o, &gi) in slot(slots, *x, g.len()).iter_mut().zip(g) {
                        *o += gi * k;
                    }
                }
            }
            Op::Tanh(a) => {
                if self.needs_grad(*a) {
                    let ga = slot(slots, *a, g.len());
                    for ((o, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                        *o += gi * (S::one() - yi * yi);
                    }
                }
            }
            Op::Silu(a) => {
                if self.needs_grad(*a) {
                    let xv = self.value(*a).data();
                    let ga = slot(slots, *a, g.len());
                    for ((o, &gi), &xi) in ga.iter_mut().zip(g).zip(xv) {
                        let s = sigmoid(xi);
                        *o += gi * s * (S::one() + xi * (S::one() - s));
                    }
                }
            }
            Op::RmsNorm { x, gain, eps } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let n = gv.len();
                let e = S::lit(*eps);
                let inv_n = S::lit(1.0 / n as f64);
                let need_x = self.needs_grad(*x);
                let need_g = self.needs_grad(*gain);
                let mut gx_all = if need_x { vec![S::zero(); xv.len()] } else { Vec::new() };
                let mut gg_all = if need_g { vec![S::zero(); n] } else { Vec::new() };
                for (r, (xrow, grow)) in xv.chunks(n).zip(g.chunks(n)).enumerate() {
                    let ms: S = xrow.iter().map(|&v| v * v).sum::<S>() * inv_n;
                    let inv = (ms + e).sqrt().recip();
                    if need_g {
                        for ((acc, &gi), &xi) in gg_all.iter_mut().zip(grow).zip(xrow) {
                            *acc += gi * xi * inv;
                        }
                    }
                    if need_x {
                        // d/dx of x·inv: (gh - x̂·mean(gh·x̂))·inv with gh = g⊙gain
                        let mut dot = S::zero();
                        for ((&gi, &w), &xi) in grow.iter().zip(gv).zip(xrow) {
                            dot += gi * w * xi * inv;
                        }
                        let mean = dot * inv_n;
                        let out = &mut gx_all[r * n..(r + 1) * n];
                        for (((o, &gi), &w), &xi) in out.iter_mut().zip(grow).zip(gv).zip(xrow) {
                            *o = (gi * w - xi * inv * mean) * inv;
                        }
                    }
                }
                if need_x {
                    add_into(slot(slots, *x, xv.len()), &gx_all);
                }
                if need_g {
                    add_into(slot(slots, *gain, n), &gg_all);
                }
            }
            Op::Softmax(x) => {
                if self.needs_grad(*x) {
                    let n = node.value.shape()[1];
                    let gx = slot(slots, *x, g.len());
                    for ((grow, yrow), orow) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: S = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((o, &gi), &yi) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if self.needs_grad(*x) {
                    let n = node.value.shape()[1];
                    let gx = slot(slots, *x, g.len());
                    for ((grow, yrow), orow) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                        let total: S = grow.iter().copied().sum();
                        for ((o, &gi), &yi) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += gi - yi.exp() * total;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.needs_grad(*table) {
                    let (v, d) = dims(self.value(*table))?;
                    let gt = slot(slots, *table, v * d);
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs_grad(*x) {
                    let total = self.value(*x).numel();
                    let n = self.value(*x).shape()[1];
                    let gx = slot(slots, *x, total);
                    add_into(&mut gx[start * n..start * n + g.len()], g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.needs_grad(p) {
                        add_into(slot(slots, p, len), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs_grad(*x) {
                    let (m, n) = dims(self.value(*x))?;
                    let w = node.value.shape()[1];
                    let gx = slot(slots, *x, m * n);
                    for r in 0..m {
                        add_into(&mut gx[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape()[0];
                let n = node.value.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.needs_grad(p) {
                        let gp = slot(slots, p, m * w);
                        for r in 0..m {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * n + col..r * n + col + w]);
                        }
                    }
                    col += w;
                }
            }
            Op::Conv1d {
                x,
                kernel,
                stride,
                padding,
            } => {
                let (t, d_in) = dims(self.value(*x))?;
                let ks = self.value(*kernel).shape();
                let (k, d_out) = (ks[0], ks[2]);
                let t_out = conv1d_out_len(t, k, *stride, *padding)?;
                let width = k * d_in;
                if self.needs_grad(*kernel) {
                    let cols = im2col(self.value(*x).data(), t, d_in, k, *stride, *padding, t_out);
                    let gk = slot(slots, *kernel, width * d_out);
                    S::gemm(width, t_out, d_out, S::one(), &cols, true, g, false, S::one(), gk);
                }
                if self.needs_grad(*x) {
                    let mut gcols = vec![S::zero(); t_out * width];
                    S::gemm(
                        t_out,
                        d_out,
                        width,
                        S::one(),
                        g,
                        false,
                        self.value(*kernel).data(),
                        true,
                        S::zero(),
                        &mut gcols,
                    );
                    let gx = slot(slots, *x, t * d_in);
                    col2im_add(&gcols, gx, t, d_in, k, *stride, *padding, t_out);
                }
            }
            Op::Sum(x) => {
                if self.needs_grad(*x) {
                    let len = self.value(*x).numel();
                    for o in slot(slots, *x, len).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::NllSum {
                logp,
                targets,
                ignore,
            } => {
                if self.needs_grad(*logp) {
                    let (m, v) = dims(self.value(*logp))?;
                    let gl = slot(slots, *logp, m * v);
                    for (i, (&t, &skip)) in targets.iter().zip(ignore).enumerate() {
                        if !skip {
                            gl[i * v + t] -= g[0];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot<S: Real>(slots: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut Vec<S> {
    slots[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn add_into<S: Real>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip_map<S: Real>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn sigmoid<S: Real>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of `build` with respect to each leaf.
    fn check(leaves: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let eval = |vals: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let out = build(&mut g, &vars);
            g.value(out).item().unwrap()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out).unwrap();
        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li]).map(|s| s.to_vec()).unwrap_or(vec![0.0; leaf.numel()]);
            for c in 0..leaf.numel() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[c] += eps;
                let mut minus = leaves.clone();
                minus[li].data_mut()[c] -= eps;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let denom = analytic[c].abs().max(numeric.abs()).max(1e-8);
                let rel = (analytic[c] - numeric).abs() / denom;
                assert!(
                    rel < 1e-4 || (analytic[c] - numeric).abs() < 1e-9,
                    "leaf {li} coord {c}: analytic {} numeric {numeric}",
                    analytic[c]
                );
            }
        }
    }

    #[test]
    fn sum_has_unit_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::matrix(2, 3, vec![0.5; 6]).unwrap(), true);
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn tanh_gate_gradient_at_zero() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::scalar(0.0), true);
        let c = g.constant(Tensor::scalar(3.5));
        let t = g.tanh(w).unwrap();
        let y = g.scalar_mul(t, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[3.5]);
    }

    #[test]
    fn reuse_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(), true);
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(), true);
        assert!(matches!(g.backward(x), Err(Error::Argument(_))));
    }

    #[test]
    fn three_layer_composite_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let leaves = vec![
                rand_tensor(&mut rng, &[4, 5]),
                rand_tensor(&mut rng, &[5, 6]),
                rand_tensor(&mut rng, &[6]),
                rand_tensor(&mut rng, &[6, 3]),
                rand_tensor(&mut rng, &[6]),
            ];
            check(leaves, |g, v| {
                let h = g.matmul(v[0], v[1]).unwrap();
                let h = g.add_row(h, v[2]).unwrap();
                let h = g.silu(h).unwrap();
                let h = g.rms_norm(h, v[4], 1e-5).unwrap();
                let h = g.matmul(h, v[3]).unwrap();
                let h = g.tanh(h).unwrap();
                let l = g.log_softmax_rows(h).unwrap();
                g.nll_sum(l, &[0, 2, 1, 1], &[false, true, false, false]).unwrap()
            });
        }
    }

    #[test]
    fn attention_pieces_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let leaves = vec![
            rand_tensor(&mut rng, &[4, 6]),
            rand_tensor(&mut rng, &[3, 6]),
            rand_tensor(&mut rng, &[3]),
            rand_tensor(&mut rng, &[5, 3]),
        ];
        check(leaves, |g, v| {
            let q = g.slice_cols(v[0], 0, 3).unwrap();
            let k = g.slice_cols(v[0], 3, 6).unwrap();
            let s = g.matmul_t(q, k).unwrap();
            let s = g.scale(s, 0.7).unwrap();
            let p = g.softmax_rows(s, true).unwrap();
            let o = g.matmul(p, q).unwrap();
            let top = g.slice_rows(o, 0, 2).unwrap();
            let bottom = g.slice_rows(o, 2, 4).unwrap();
            let both = g.concat_rows(&[bottom, top]).unwrap();
            let wide = g.concat_cols(&[both, k]).unwrap();
            let w = g.tanh(v[2]).unwrap();
            let emb = g.embedding(v[3], &[1, 4, 1, 0]).unwrap();
            let emb = g.concat_cols(&[emb, emb]).unwrap();
            let y = g.mul(wide, emb).unwrap();
            let gate = g.slice_cols(w, 0, 1).unwrap();
            let gate = g.sum(gate).unwrap();
            let y = g.scalar_mul(gate, y).unwrap();
            g.sum(y).unwrap()
        });
    }

    #[test]
    fn conv_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![rand_tensor(&mut rng, &[7, 3]), rand_tensor(&mut rng, &[3, 3, 2])];
        check(leaves, |g, v| {
            let y = g.conv1d(v[0], v[1], 2, 1).unwrap();
            let y = g.silu(y).unwrap();
            let y = g.mul(y, y).unwrap();
            g.sum(y).unwrap()
        });
    }
}
