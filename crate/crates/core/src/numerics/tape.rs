//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles during the
//! forward pass. [`Tape::backward`] replays the records in exact reverse order
//! and accumulates gradients into fresh, zeroed slots for every registered
//! parameter. Frozen inputs are recorded as borrowed constants so the base
//! model's weights are never copied or differentiated.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::matrix::{gemm, gemm_into, Matrix};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Caller-chosen identifier of a trainable matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Gather { table: usize, ids: Vec<usize> },
    SliceCols { a: usize, start: usize },
    ConcatCols(Vec<usize>),
    CausalSoftmax(usize),
    Attention { q: usize, k: usize, v: usize, segments: Vec<usize>, heads: usize, probs: Vec<Vec<f64>> },
    LayerNorm { a: usize, rstd: Vec<f64> },
    Gelu(usize),
    CrossEntropy { logits: usize, grad: Matrix },
    SumSquares(usize),
    Sum(usize),
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to every registered parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, id: ParamId, grad: Matrix) {
        self.map.insert(id, grad);
    }

    /// Adds `other` into `self`, creating entries that are missing.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (id, g) in &other.map {
            match self.map.get_mut(id) {
                Some(mine) => mine.add_assign(g)?,
                None => {
                    self.map.insert(*id, g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.map.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Matrix::is_finite)
    }
}

/// Operation recorder. Owned by exactly one thread of execution.
pub struct Tape<'a> {
    id: u64,
    nodes: Vec<Node<'a>>,
    params: Vec<(ParamId, usize)>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.idx].value
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable recorded on a different tape");
        v.idx
    }

    fn ng(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    /// Records a frozen input without copying it.
    pub fn constant(&mut self, m: &'a Matrix) -> Var {
        self.push(Cow::Borrowed(m), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, m: Matrix) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, false)
    }

    /// Records a trainable input whose gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, m: &'a Matrix) -> Var {
        let v = self.push(Cow::Borrowed(m), Op::Leaf, true);
        self.params.push((id, v.idx));
        v
    }

    /// Registers `id` without letting gradient reach it: the backward pass
    /// reports an exact zero for it.
    pub fn masked_param(&mut self, id: ParamId, m: &'a Matrix) -> Var {
        let v = self.push(Cow::Borrowed(m), Op::Leaf, false);
        self.params.push((id, v.idx));
        v
    }

    pub fn param_owned(&mut self, id: ParamId, m: Matrix) -> Var {
        let v = self.push(Cow::Owned(m), Op::Leaf, true);
        self.params.push((id, v.idx));
        v
    }

    fn matmul_impl(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let value = gemm(&self.nodes[ia].value, ta, &self.nodes[ib].value, tb)?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(Cow::Owned(value), Op::MatMul { a: ia, b: ib, ta, tb }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, false, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, false, b, true)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, true, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let value = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(Cow::Owned(value), Op::Add(ia, ib), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let value = self.nodes[ia].value.sub(&self.nodes[ib].value)?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(Cow::Owned(value), Op::Sub(ia, ib), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ia = self.check(a);
        let value = self.nodes[ia].value.scale(s);
        let ng = self.ng(ia);
        self.push(Cow::Owned(value), Op::Scale(ia, s), ng)
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.check(table);
        let t = &self.nodes[it].value;
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::usage(format!(
                "row index {bad} out of range for table with {} rows",
                t.rows()
            )));
        }
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        let ng = self.ng(it);
        Ok(self.push(
            Cow::Owned(out),
            Op::Gather {
                table: it,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a);
        let src = &self.nodes[ia].value;
        if start + len > src.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                left: src.shape(),
                right: (start, len),
            });
        }
        let mut out = Matrix::zeros(src.rows(), len);
        for r in 0..src.rows() {
            out.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
        }
        let ng = self.ng(ia);
        Ok(self.push(Cow::Owned(out), Op::SliceCols { a: ia, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect();
        let rows = idx.first().map_or(0, |&i| self.nodes[i].value.rows());
        let mut cols = 0;
        for &i in &idx {
            let v = &self.nodes[i].value;
            if v.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: (rows, cols),
                    right: v.shape(),
                });
            }
            cols += v.cols();
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &i in &idx {
            let v = &self.nodes[i].value;
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        let ng = idx.iter().any(|&i| self.ng(i));
        Ok(self.push(Cow::Owned(out), Op::ConcatCols(idx), ng))
    }

    /// Multi-head causal self-attention over a stack of independent sequences.
    ///
    /// `q`, `k`, `v` are `N × d` with rows grouped into consecutive segments
    /// of the given lengths; positions never attend across segments. Scores
    /// are scaled by `1/sqrt(d / heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: &[usize], heads: usize) -> Result<Var> {
        let (iq, ik, iv) = (self.check(q), self.check(k), self.check(v));
        let (qm, km, vm) = (&self.nodes[iq].value, &self.nodes[ik].value, &self.nodes[iv].value);
        let (n, d) = qm.shape();
        if km.shape() != (n, d) || vm.shape() != (n, d) {
            return Err(Error::Shape {
                op: "attention",
                left: qm.shape(),
                right: if km.shape() != (n, d) { km.shape() } else { vm.shape() },
            });
        }
        if heads == 0 || d % heads != 0 || segments.iter().sum::<usize>() != n {
            return Err(Error::usage(format!(
                "attention over {n}x{d} with {heads} heads and segments summing to {}",
                segments.iter().sum::<usize>()
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        let mut start = 0;
        for &len in segments {
            for h in 0..heads {
                let c = h * dh;
                // Lower-triangular probabilities, row i holds i + 1 entries.
                let mut p = Vec::with_capacity(len * (len + 1) / 2);
                for i in 0..len {
                    let qi = &qm.row(start + i)[c..c + dh];
                    let base = p.len();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &km.row(start + j)[c..c + dh];
                        let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        max = max.max(s);
                        p.push(s);
                    }
                    let mut total = 0.0;
                    for x in &mut p[base..] {
                        *x = (*x - max).exp();
                        total += *x;
                    }
                    let o = &mut out.row_mut(start + i)[c..c + dh];
                    for (j, x) in p[base..].iter_mut().enumerate() {
                        *x /= total;
                        for (ov, vv) in o.iter_mut().zip(&vm.row(start + j)[c..c + dh]) {
                            *ov += *x * vv;
                        }
                    }
                }
                probs.push(p);
            }
            start += len;
        }
        let ng = self.ng(iq) || self.ng(ik) || self.ng(iv);
        Ok(self.push(
            Cow::Owned(out),
            Op::Attention {
                q: iq,
                k: ik,
                v: iv,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Row-wise softmax where entry `(i, j)` is masked out for `j > i`.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a);
        let src = &self.nodes[ia].value;
        if src.cols() < src.rows() {
            return Err(Error::Shape {
                op: "causal_softmax",
                left: src.shape(),
                right: (src.rows(), src.rows()),
            });
        }
        let mut out = Matrix::zeros(src.rows(), src.cols());
        for i in 0..src.rows() {
            let row = &src.row(i)[..=i];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = out.row_mut(i);
            let mut total = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                dst[j] = e;
                total += e;
            }
            for v in &mut dst[..=i] {
                *v /= total;
            }
        }
        let ng = self.ng(ia);
        Ok(self.push(Cow::Owned(out), Op::CausalSoftmax(ia), ng))
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let ia = self.check(a);
        let src = &self.nodes[ia].value;
        let n = src.cols() as f64;
        let mut out = Matrix::zeros(src.rows(), src.cols());
        let mut rstd = Vec::with_capacity(src.rows());
        for r in 0..src.rows() {
            let row = src.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (d, x) in out.row_mut(r).iter_mut().zip(row) {
                *d = (x - mean) * s;
            }
            rstd.push(s);
        }
        let ng = self.ng(ia);
        self.push(Cow::Owned(out), Op::LayerNorm { a: ia, rstd }, ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ia = self.check(a);
        let value = self.nodes[ia].value.map(|x| {
            let u = GELU_C * (x + GELU_K * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        let ng = self.ng(ia);
        self.push(Cow::Owned(value), Op::Gelu(ia), ng)
    }

    /// Mean over unmasked positions of `-log softmax(logits_t)[target_t]`.
    ///
    /// `mask[t] == true` means position `t` contributes to the loss.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::degenerate("cross-entropy over an all-masked sequence"));
        }
        let w = 1.0 / count as f64;
        let weights: Vec<f64> = mask.iter().map(|&m| if m { w } else { 0.0 }).collect();
        self.weighted_cross_entropy(logits, targets, &weights)
    }

    /// `Σ_t weights[t] · -log softmax(logits_t)[target_t]`; zero-weight rows
    /// are skipped entirely.
    pub fn weighted_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let il = self.check(logits);
        let lg = &self.nodes[il].value;
        let (t_len, vocab) = lg.shape();
        if targets.len() != t_len || weights.len() != t_len {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: lg.shape(),
                right: (targets.len(), weights.len()),
            });
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::degenerate("cross-entropy over an all-masked sequence"));
        }
        let mut grad = Matrix::zeros(t_len, vocab);
        let mut loss = 0.0;
        for t in 0..t_len {
            let w = weights[t];
            if w == 0.0 {
                continue;
            }
            let target = targets[t];
            if target >= vocab {
                return Err(Error::usage(format!(
                    "target id {target} out of range for vocabulary of {vocab}"
                )));
            }
            let row = lg.row(t);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            loss += w * (lse - row[target]);
            let g = grad.row_mut(t);
            for (gv, x) in g.iter_mut().zip(row) {
                *gv = w * (x - lse).exp();
            }
            g[target] -= w;
        }
        let value = Matrix::filled(1, 1, loss);
        let ng = self.ng(il);
        Ok(self.push(Cow::Owned(value), Op::CrossEntropy { logits: il, grad }, ng))
    }

    /// Squared Frobenius norm as a 1×1 value.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let ia = self.check(a);
        let value = Matrix::filled(1, 1, self.nodes[ia].value.frobenius_sq());
        let ng = self.ng(ia);
        self.push(Cow::Owned(value), Op::SumSquares(ia), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ia = self.check(a);
        let value = Matrix::filled(1, 1, self.nodes[ia].value.sum());
        let ng = self.ng(ia);
        self.push(Cow::Owned(value), Op::Sum(ia), ng)
    }

    /// Reads a 1×1 value.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    /// Back-propagates from the scalar `loss`. Every registered parameter
    /// receives a gradient, exactly zero when the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::usage("loss variable is not recorded on this tape"));
        }
        let lm = &self.nodes[loss.idx].value;
        if lm.shape() != (1, 1) {
            return Err(Error::usage(format!("loss must be 1x1, got {:?}", lm.shape())));
        }
        if !lm.get(0, 0).is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", lm.get(0, 0))));
        }

        let mut grads: Vec<Option<Matrix>> = (0..=loss.idx).map(|_| None).collect();
        grads[loss.idx] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.idx).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            // Leaves keep their gradient for collection below.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let mut out = Gradients::default();
        for &(id, idx) in &self.params {
            let g = match grads.get(idx).and_then(|g| g.as_ref()) {
                Some(g) => g.clone(),
                None => {
                    let (r, c) = self.nodes[idx].value.shape();
                    Matrix::zeros(r, c)
                }
            };
            match out.map.get_mut(&id) {
                Some(existing) => existing.add_assign(&g)?,
                None => {
                    out.map.insert(id, g);
                }
            }
        }
        if !out.all_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok(out)
    }

    fn backward_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                if self.ng(a) {
                    let slot = grads[a].get_or_insert_with(|| Matrix::zeros(av.rows(), av.cols()));
                    if ta {
                        gemm_into(bv, tb, g, true, 1.0, slot);
                    } else {
                        gemm_into(g, false, bv, !tb, 1.0, slot);
                    }
                }
                if self.ng(b) {
                    let slot = grads[b].get_or_insert_with(|| Matrix::zeros(bv.rows(), bv.cols()));
                    if tb {
                        gemm_into(g, true, av, ta, 1.0, slot);
                    } else {
                        gemm_into(av, !ta, g, false, 1.0, slot);
                    }
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, self.ng(*a), g, 1.0)?;
                accumulate(grads, *b, self.ng(*b), g, 1.0)?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, self.ng(*a), g, 1.0)?;
                accumulate(grads, *b, self.ng(*b), g, -1.0)?;
            }
            Op::Scale(a, s) => accumulate(grads, *a, self.ng(*a), g, *s)?,
            Op::Gather { table, ids } => {
                if self.ng(*table) {
                    let tv = &self.nodes[*table].value;
                    let slot = grads[*table].get_or_insert_with(|| Matrix::zeros(tv.rows(), tv.cols()));
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, s) in slot.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if self.ng(*a) {
                    let av = &self.nodes[*a].value;
                    let slot = grads[*a].get_or_insert_with(|| Matrix::zeros(av.rows(), av.cols()));
                    for r in 0..g.rows() {
                        for (d, s) in slot.row_mut(r)[*start..*start + g.cols()].iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = &self.nodes[p].value;
                    if self.ng(p) {
                        let slot = grads[p].get_or_insert_with(|| Matrix::zeros(pv.rows(), pv.cols()));
                        for r in 0..g.rows() {
                            for (d, s) in slot.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + pv.cols()]) {
                                *d += s;
                            }
                        }
                    }
                    offset += pv.cols();
                }
            }
            Op::CausalSoftmax(a) => {
                if self.ng(*a) {
                    let y = &node.value;
                    let av = &self.nodes[*a].value;
                    let slot = grads[*a].get_or_insert_with(|| Matrix::zeros(av.rows(), av.cols()));
                    for r in 0..y.rows() {
                        let yr = &y.row(r)[..=r];
                        let gr = &g.row(r)[..=r];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, d) in slot.row_mut(r)[..=r].iter_mut().enumerate() {
                            *d += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => self.attention_backward((*q, *k, *v), segments, *heads, probs, g, grads),
            Op::LayerNorm { a, rstd } => {
                if self.ng(*a) {
                    let y = &node.value;
                    let n = y.cols() as f64;
                    let av = &self.nodes[*a].value;
                    let slot = grads[*a].get_or_insert_with(|| Matrix::zeros(av.rows(), av.cols()));
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (j, d) in slot.row_mut(r).iter_mut().enumerate() {
                            *d += rstd[r] * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if self.ng(*a) {
                    let av = &self.nodes[*a].value;
                    let slot = grads[*a].get_or_insert_with(|| Matrix::zeros(av.rows(), av.cols()));
                    for ((d, &x), &gv) in slot.data_mut().iter_mut().zip(av.data()).zip(g.data()) {
                        let u = GELU_C * (x + GELU_K * x * x * x);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        *d += gv * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
                    }
                }
            }
            Op::CrossEntropy { logits, grad } => {
                accumulate(grads, *logits, self.ng(*logits), grad, g.get(0, 0))?;
            }
            Op::SumSquares(a) => {
                let av = &self.nodes[*a].value;
                accumulate(grads, *a, self.ng(*a), av, 2.0 * g.get(0, 0))?;
            }
            Op::Sum(a) => {
                if self.ng(*a) {
                    let av = &self.nodes[*a].value;
                    let s = g.get(0, 0);
                    let slot = grads[*a].get_or_insert_with(|| Matrix::zeros(av.rows(), av.cols()));
                    for d in slot.data_mut() {
                        *d += s;
                    }
                }
            }
        }
        Ok(())
    }
}

impl Tape<'_> {
    fn attention_backward(
        &self,
        (iq, ik, iv): (usize, usize, usize),
        segments: &[usize],
        heads: usize,
        probs: &[Vec<f64>],
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) {
        let (qm, km, vm) = (&self.nodes[iq].value, &self.nodes[ik].value, &self.nodes[iv].value);
        let (n, d) = qm.shape();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        let mut start = 0;
        let mut ds = Vec::new();
        for (s_idx, &len) in segments.iter().enumerate() {
            for h in 0..heads {
                let c = h * dh;
                let p = &probs[s_idx * heads + h];
                let mut off = 0;
                for i in 0..len {
                    let gi = &g.row(start + i)[c..c + dh];
                    let pi = &p[off..off + i + 1];
                    ds.clear();
                    let mut dot = 0.0;
                    for (j, &pij) in pi.iter().enumerate() {
                        let vj = &vm.row(start + j)[c..c + dh];
                        let dp = gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                        ds.push(dp);
                        dot += dp * pij;
                        for (dvv, gv) in dv.row_mut(start + j)[c..c + dh].iter_mut().zip(gi) {
                            *dvv += pij * gv;
                        }
                    }
                    for (j, &pij) in pi.iter().enumerate() {
                        let s = pij * (ds[j] - dot) * scale;
                        if s == 0.0 {
                            continue;
                        }
                        for t in 0..dh {
                            dq.data_mut()[(start + i) * d + c + t] += s * km.get(start + j, c + t);
                            dk.data_mut()[(start + j) * d + c + t] += s * qm.get(start + i, c + t);
                        }
                    }
                    off += i + 1;
                }
            }
            start += len;
        }
        for (idx, m) in [(iq, dq), (ik, dk), (iv, dv)] {
            if self.ng(idx) {
                match &mut grads[idx] {
                    Some(slot) => {
                        for (a, b) in slot.data_mut().iter_mut().zip(m.data()) {
                            *a += b;
                        }
                    }
                    None => grads[idx] = Some(m),
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], idx: usize, needs: bool, g: &Matrix, s: f64) -> Result<()> {
    if !needs {
        return Ok(());
    }
    match &mut grads[idx] {
        Some(slot) => {
            if slot.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "backward",
                    left: slot.shape(),
                    right: g.shape(),
                });
            }
            for (d, v) in slot.data_mut().iter_mut().zip(g.data()) {
                *d += s * v;
            }
        }
        None => grads[idx] = Some(g.scale(s)),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let w = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]);
        let mut tape = Tape::new();
        let v = tape.param(ParamId(0), &w);
        let loss = tape.sum(v);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap(), &Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let w = Matrix::from_rows(&[[1.0, 2.0]]);
        let zero = Matrix::zeros(1, 1);
        let mut tape = Tape::new();
        tape.param(ParamId(7), &w);
        let c = tape.constant(&zero);
        let loss = tape.sum(c);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ParamId(7)).unwrap(), &Matrix::zeros(1, 2));
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let a = Matrix::from_rows(&[[1.0, 2.0]]);
        let b = Matrix::from_rows(&[[3.0, 4.0]]);
        let mut tape = Tape::new();
        let va = tape.param(ParamId(0), &a);
        tape.param(ParamId(1), &b);
        let loss = tape.sum_squares(va);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap(), &Matrix::from_rows(&[[2.0, 4.0]]));
        assert!(g.get(ParamId(1)).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn foreign_loss_is_a_usage_error() {
        let w = Matrix::filled(1, 1, 2.0);
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        t1.param(ParamId(0), &w);
        let v = t2.constant(&w);
        let loss = t2.sum(v);
        assert!(matches!(t1.backward(loss), Err(Error::Usage(_))));
    }

    #[test]
    fn non_scalar_loss_is_a_usage_error() {
        let w = Matrix::filled(2, 2, 1.0);
        let mut tape = Tape::new();
        let v = tape.param(ParamId(0), &w);
        assert!(matches!(tape.backward(v), Err(Error::Usage(_))));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let logits = Matrix::zeros(1, 4);
        let mut tape = Tape::new();
        let l = tape.constant(&logits);
        let loss = tape.cross_entropy(l, &[2], &[true]).unwrap();
        assert!((tape.scalar(loss) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_saturated_is_zero() {
        let logits = Matrix::from_rows(&[[0.0, 1000.0, 0.0]]);
        let mut tape = Tape::new();
        let l = tape.constant(&logits);
        let loss = tape.cross_entropy(l, &[1], &[true]).unwrap();
        assert!(tape.scalar(loss).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_two_positions() {
        let logits = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let mut tape = Tape::new();
        let l = tape.constant(&logits);
        let loss = tape.cross_entropy(l, &[0, 1], &[true, true]).unwrap();
        // -log(e/(e+1)) = ln(1 + e^-1)
        let expected = (1.0 + (-1f64).exp()).ln();
        assert!((tape.scalar(loss) - expected).abs() < 1e-15);
        assert!((expected - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_all_masked_is_degenerate() {
        let logits = Matrix::zeros(2, 3);
        let mut tape = Tape::new();
        let l = tape.constant(&logits);
        assert!(matches!(
            tape.cross_entropy(l, &[0, 1], &[false, false]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn masked_positions_do_not_contribute() {
        let logits = Matrix::from_rows(&[[5.0, 0.0], [0.0, 0.0]]);
        let mut tape = Tape::new();
        let l = tape.param(ParamId(0), &logits);
        let loss = tape.cross_entropy(l, &[1, 0], &[false, true]).unwrap();
        assert!((tape.scalar(loss) - 2f64.ln()).abs() < 1e-15);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().row(0), &[0.0, 0.0]);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let s = Matrix::from_rows(&[[1.0, 9.0, 9.0], [0.0, 0.0, 9.0], [0.0, 0.0, 0.0]]);
        let mut tape = Tape::new();
        let v = tape.constant(&s);
        let p = tape.causal_softmax(v).unwrap();
        let p = tape.value(p);
        assert_eq!(p.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(p.row(1), &[0.5, 0.5, 0.0]);
        assert!((p.row(2).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
