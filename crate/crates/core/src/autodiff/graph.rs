//! Reverse-mode tape.
//!
//! A [`Graph`] is rebuilt for every minibatch. Nodes are appended in
//! evaluation order, so walking the node list backwards is a valid reverse
//! topological order and each node is visited exactly once. Parameter leaves
//! borrow their values from the [`ParamStore`] instead of copying them.
//!
//! `backward` never mutates the graph: calling it twice on the same root
//! returns identical gradients.

use std::collections::HashMap;

use super::kernels::{axpy, dot, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use super::params::{ParamId, ParamStore};
use super::tensor::{cross_entropy_row, sigmoid, softmax_in_place, Tensor};
use crate::error::{Error, Result};

/// Logits are clamped to this magnitude inside the binary cross-entropy.
pub const LOGIT_CLAMP: f64 = 30.0;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gather { table: Var, ids: Vec<Option<usize>> },
    Concat(Vec<Var>),
    SelectRows { a: Var, rows: Vec<usize> },
    SelectCol { a: Var, col: usize },
    MulRows { a: Var, s: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, ranges: Vec<(usize, usize)>, probs: Vec<f64> },
    RowDots { h: Var, e: Var, n: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    Bce { logits: Var, labels: Vec<f64>, weights: Vec<f64> },
    Sum(Var),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    node_grads: Vec<Option<Tensor>>,
    param_vars: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.node_grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_vars.get(&id).and_then(|v| self.wrt(*v))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(256), param_vars: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; no gradient flows into it unless `track` is set.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: Some(t), op: Op::Input, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is recorded (used for input-gradient checks).
    pub fn tracked_input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: Some(t), op: Op::Input, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id), requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 || tb.shape().len() != 2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), m, k, n, &mut out);
        let mut shape = ta.shape().to_vec();
        match shape.last_mut() {
            Some(last) => *last = n,
            None => shape = vec![n],
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` bias to every row of an `m×n` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = ta.cols();
        if tb.len() != n {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            out.row_mut(r).iter_mut().zip(tb.data()).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(out, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(a, s), &[a])
    }

    /// ReLU; the derivative at exactly zero is taken to be zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Relu(a), &[a])
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut t = self.value(a).clone();
        if t.is_empty() || t.cols() == 0 {
            return Err(Error::Empty("softmax"));
        }
        for r in 0..t.rows() {
            softmax_in_place(t.row_mut(r));
        }
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols();
        if tg.len() != d || tb.len() != d {
            return Err(Error::shape("layer_norm", format!("x {:?}, gamma {:?}", tx.shape(), tg.shape())));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    /// Row lookup. `None` produces a zero row that receives no gradient.
    pub fn gather(&mut self, table: Var, ids: &[Option<usize>]) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = (t.rows(), t.cols());
        let mut out = vec![0.0; ids.len() * d];
        for (i, id) in ids.iter().enumerate() {
            if let Some(id) = *id {
                if id >= rows {
                    let name = match self.nodes[table.0].op {
                        Op::Param(pid) => self.params.name(pid).to_string(),
                        _ => "<tensor>".to_string(),
                    };
                    return Err(Error::Index { table: name, id, rows });
                }
                out[i * d..(i + 1) * d].copy_from_slice(t.row(id));
            }
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(t, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    /// Concatenates along the last axis; all parts must have the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat"))?;
        let rows = self.value(*first).rows();
        let mut width = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rows() != rows {
                return Err(Error::shape("concat", format!("row counts {} vs {}", rows, t.rows())));
            }
            width += t.cols();
        }
        let mut out = vec![0.0; rows * width];
        let mut off = 0;
        for p in parts {
            let t = self.value(*p);
            let c = t.cols();
            for r in 0..rows {
                out[r * width + off..r * width + off + c].copy_from_slice(t.row(r));
            }
            off += c;
        }
        let t = Tensor::new(vec![rows, width], out)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), parts))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let d = t.cols();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= t.rows() {
                return Err(Error::shape("select_rows", format!("row {r} of {}", t.rows())));
            }
            out.extend_from_slice(t.row(r));
        }
        let t = Tensor::new(vec![rows.len(), d], out)?;
        Ok(self.push(t, Op::SelectRows { a, rows: rows.to_vec() }, &[a]))
    }

    /// Column `col` of an `m×n` tensor as a length-`m` vector.
    pub fn select_col(&mut self, a: Var, col: usize) -> Result<Var> {
        let t = self.value(a);
        if col >= t.cols() {
            return Err(Error::shape("select_col", format!("column {col} of {:?}", t.shape())));
        }
        let data = (0..t.rows()).map(|r| t.row(r)[col]).collect();
        Ok(self.push(Tensor::vector(data), Op::SelectCol { a, col }, &[a]))
    }

    /// Scales row `i` of `a` by `s[i]`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ts.len() != ta.rows() {
            return Err(Error::shape("mul_rows", format!("{:?} by {:?}", ta.shape(), ts.shape())));
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            let f = ts.data()[r];
            out.row_mut(r).iter_mut().for_each(|x| *x *= f);
        }
        Ok(self.push(out, Op::MulRows { a, s }, &[a, s]))
    }

    /// Multi-head scaled dot-product attention with per-query key windows.
    ///
    /// Query row `i` attends to key rows `ranges[i].0 .. ranges[i].1`. An
    /// empty window yields a zero output row. Scores are scaled by
    /// `1/sqrt(d/heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, ranges: &[(usize, usize)]) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let nq = tq.rows();
        if heads == 0 || d % heads != 0 || tk.cols() != d || tv.cols() != d || tk.rows() != tv.rows() || ranges.len() != nq
        {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}, heads {heads}, {} ranges", tq.shape(), tk.shape(), tv.shape(), ranges.len()),
            ));
        }
        let nk = tk.rows();
        if let Some(&(s, e)) = ranges.iter().find(|&&(s, e)| s > e || e > nk) {
            return Err(Error::shape("attention", format!("key window {s}..{e} with {nk} keys")));
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let total: usize = ranges.iter().map(|(s, e)| e - s).sum::<usize>() * heads;
        let mut probs = Vec::with_capacity(total);
        let mut out = vec![0.0; nq * d];
        let mut scores = Vec::new();
        for (i, &(s, e)) in ranges.iter().enumerate() {
            if s == e {
                continue;
            }
            let qrow = tq.row(i);
            for h in 0..heads {
                let qh = &qrow[h * hd..(h + 1) * hd];
                scores.clear();
                scores.extend((s..e).map(|j| scale * dot(qh, &tk.row(j)[h * hd..(h + 1) * hd])));
                softmax_in_place(&mut scores);
                let orow = &mut out[i * d + h * hd..i * d + (h + 1) * hd];
                for (j, &p) in (s..e).zip(scores.iter()) {
                    axpy(p, &tv.row(j)[h * hd..(h + 1) * hd], orow);
                }
                probs.extend_from_slice(&scores);
            }
        }
        let t = Tensor::new(vec![nq, d], out)?;
        let op = Op::Attention { q, k, v, heads, ranges: ranges.to_vec(), probs };
        Ok(self.push(t, op, &[q, k, v]))
    }

    /// `out[p, c] = h[p] · e[p*n + c]` for `h: P×d`, `e: (P·n)×d`.
    pub fn row_dots(&mut self, h: Var, e: Var, n: usize) -> Result<Var> {
        let (th, te) = (self.value(h), self.value(e));
        let (p, d) = (th.rows(), th.cols());
        if te.cols() != d || te.rows() != p * n {
            return Err(Error::shape("row_dots", format!("h {:?}, e {:?}, n {n}", th.shape(), te.shape())));
        }
        let mut out = vec![0.0; p * n];
        for r in 0..p {
            for c in 0..n {
                out[r * n + c] = dot(th.row(r), te.row(r * n + c));
            }
        }
        let t = Tensor::new(vec![p, n], out)?;
        Ok(self.push(t, Op::RowDots { h, e, n }, &[h, e]))
    }

    /// `Σ_p weights[p] · (−ln softmax(logits[p])[targets[p]])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, n) = (t.rows(), t.cols());
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::shape("cross_entropy", format!("{rows} rows, {} targets", targets.len())));
        }
        if n == 0 {
            return Err(Error::Empty("cross_entropy"));
        }
        if let Some(&bad) = targets.iter().find(|&&i| i >= n) {
            return Err(Error::Index { table: "logits".into(), id: bad, rows: n });
        }
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(rows * n);
        for r in 0..rows {
            let row = t.row(r);
            loss += weights[r] * cross_entropy_row(row, targets[r]);
            let start = probs.len();
            probs.extend_from_slice(row);
            softmax_in_place(&mut probs[start..]);
        }
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Weighted binary cross-entropy on logits clamped to ±[`LOGIT_CLAMP`].
    /// Logits beyond the clamp receive no gradient.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64], weights: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.len() != labels.len() || weights.len() != labels.len() {
            return Err(Error::shape("bce_with_logits", format!("{:?} vs {} labels", t.shape(), labels.len())));
        }
        let loss: f64 = t
            .data()
            .iter()
            .zip(labels)
            .zip(weights)
            .map(|((&z, &y), &w)| {
                let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
                w * (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            })
            .sum();
        let op = Op::Bce { logits, labels: labels.to_vec(), weights: weights.to_vec() };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rt = self.value(root);
        if rt.len() != 1 {
            return Err(Error::NonScalarRoot(rt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(rt.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.backprop_node(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { node_grads: grads, param_vars: self.param_vars.clone() })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.value(v).shape().to_vec();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape)))
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(ga) = self.grad_slot(grads, *a) {
                    matmul_a_bt_acc(gd, tb.data(), m, k, n, ga.data_mut());
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    matmul_at_b_acc(ta.data(), gd, m, k, n, gb.data_mut());
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.add_assign(gd);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    gb.add_assign(gd);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.add_assign(gd);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    gb.data_mut().iter_mut().zip(gd).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((x, y), bv) in ga.data_mut().iter_mut().zip(gd).zip(tb.data()) {
                        *x += y * bv;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for ((x, y), av) in gb.data_mut().iter_mut().zip(gd).zip(ta.data()) {
                        *x += y * av;
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.add_assign(gd);
                }
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    for r in 0..g.rows() {
                        gb.add_assign(g.row(r));
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    axpy(*s, gd, ga.data_mut());
                }
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((x, y), av) in ga.data_mut().iter_mut().zip(gd).zip(ta.data()) {
                        if *av > 0.0 {
                            *x += y;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let out = self.nodes[idx].value.as_ref().expect("softmax value");
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for r in 0..out.rows() {
                        let (p, gr) = (out.row(r), g.row(r));
                        let s = dot(p, gr);
                        for ((x, &pv), &gv) in ga.row_mut(r).iter_mut().zip(p).zip(gr) {
                            *x += pv * (gv - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let tg = self.value(*gamma);
                let d = tg.len();
                let rows = g.rows();
                if let Some(gb) = self.grad_slot(grads, *beta) {
                    for r in 0..rows {
                        gb.add_assign(g.row(r));
                    }
                }
                if let Some(gg) = self.grad_slot(grads, *gamma) {
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for ((o, &gv), &h) in gg.data_mut().iter_mut().zip(g.row(r)).zip(xh) {
                            *o += gv * h;
                        }
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for ((o, &gv), &gm) in dxhat.iter_mut().zip(g.row(r)).zip(tg.data()) {
                            *o = gv * gm;
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx = dot(&dxhat, xh);
                        let f = inv_std[r] / d as f64;
                        for ((o, &dh), &h) in gx.row_mut(r).iter_mut().zip(&dxhat).zip(xh) {
                            *o += f * (d as f64 * dh - sum_d - h * sum_dx);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = self.grad_slot(grads, *table) {
                    for (i, id) in ids.iter().enumerate() {
                        if let Some(id) = *id {
                            gt.row_mut(id).iter_mut().zip(g.row(i)).for_each(|(o, v)| *o += v);
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let width = g.cols();
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if let Some(gp) = self.grad_slot(grads, *p) {
                        for r in 0..g.rows() {
                            let src = &gd[r * width + off..r * width + off + c];
                            gp.row_mut(r).iter_mut().zip(src).for_each(|(o, v)| *o += v);
                        }
                    }
                    off += c;
                }
            }
            Op::SelectRows { a, rows } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (i, &r) in rows.iter().enumerate() {
                        ga.row_mut(r).iter_mut().zip(g.row(i)).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::SelectCol { a, col } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (r, &v) in gd.iter().enumerate() {
                        ga.row_mut(r)[*col] += v;
                    }
                }
            }
            Op::MulRows { a, s } => {
                let (ta, ts) = (self.value(*a), self.value(*s));
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for r in 0..g.rows() {
                        axpy(ts.data()[r], g.row(r), ga.row_mut(r));
                    }
                }
                if let Some(gs) = self.grad_slot(grads, *s) {
                    for r in 0..g.rows() {
                        gs.data_mut()[r] += dot(g.row(r), ta.row(r));
                    }
                }
            }
            Op::Attention { q, k, v, heads, ranges, probs } => {
                self.attention_backward(g, *q, *k, *v, *heads, ranges, probs, grads);
            }
            Op::RowDots { h, e, n } => {
                let (th, te) = (self.value(*h), self.value(*e));
                let n = *n;
                if let Some(gh) = self.grad_slot(grads, *h) {
                    for r in 0..th.rows() {
                        let ghr = gh.row_mut(r);
                        for c in 0..n {
                            axpy(gd[r * n + c], te.row(r * n + c), ghr);
                        }
                    }
                }
                if let Some(ge) = self.grad_slot(grads, *e) {
                    for r in 0..th.rows() {
                        for c in 0..n {
                            axpy(gd[r * n + c], th.row(r), ge.row_mut(r * n + c));
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let up = gd[0];
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    let n = gl.cols();
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let f = up * w;
                        let p = &probs[r * n..(r + 1) * n];
                        for (j, (o, &pv)) in gl.row_mut(r).iter_mut().zip(p).enumerate() {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            *o += f * (pv - onehot);
                        }
                    }
                }
            }
            Op::Bce { logits, labels, weights } => {
                let up = gd[0];
                let tl = self.value(*logits);
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    for (((o, &z), &y), &w) in gl.data_mut().iter_mut().zip(tl.data()).zip(labels).zip(weights) {
                        if z.abs() < LOGIT_CLAMP {
                            *o += up * w * (sigmoid(z) - y);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let s = gd[0];
                    ga.data_mut().iter_mut().for_each(|x| *x += s);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        ranges: &[(usize, usize)],
        probs: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut gq = self.nodes[q.0].requires_grad.then(|| Tensor::zeros(tq.shape()));
        let mut gk = self.nodes[k.0].requires_grad.then(|| Tensor::zeros(tk.shape()));
        let mut gv = self.nodes[v.0].requires_grad.then(|| Tensor::zeros(tv.shape()));
        let mut off = 0;
        let mut ds = Vec::new();
        for (i, &(s, e)) in ranges.iter().enumerate() {
            let len = e - s;
            if len == 0 {
                continue;
            }
            let grow = g.row(i);
            let qrow = tq.row(i);
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                let p = &probs[off..off + len];
                off += len;
                let go = &grow[cols.clone()];
                ds.clear();
                ds.extend((s..e).map(|j| dot(go, &tv.row(j)[cols.clone()])));
                let pd = dot(p, &ds);
                for (dsv, &pv) in ds.iter_mut().zip(p) {
                    *dsv = pv * (*dsv - pd) * scale;
                }
                if let Some(gv) = gv.as_mut() {
                    for (j, &pv) in (s..e).zip(p) {
                        axpy(pv, go, &mut gv.row_mut(j)[cols.clone()]);
                    }
                }
                if let Some(gq) = gq.as_mut() {
                    let out = &mut gq.row_mut(i)[cols.clone()];
                    for (j, &dsv) in (s..e).zip(ds.iter()) {
                        axpy(dsv, &tk.row(j)[cols.clone()], out);
                    }
                }
                if let Some(gk) = gk.as_mut() {
                    let qh = &qrow[cols.clone()];
                    for (j, &dsv) in (s..e).zip(ds.iter()) {
                        axpy(dsv, qh, &mut gk.row_mut(j)[cols.clone()]);
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(local) = local {
                let slot = self.grad_slot(grads, var).expect("requires grad");
                slot.add_assign(local.data());
            }
        }
    }
}
