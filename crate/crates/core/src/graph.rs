//! Taped reverse-mode differentiation over matrices.
//!
//! A [`Graph`] borrows a [`ParamStore`] immutably, records every operation as
//! a node holding its forward value, and produces [`Gradients`] for the store
//! on [`Graph::backward`]. The store is only mutated by the optimizer, after
//! the graph is dropped.

use std::collections::HashMap;

use crate::error::{dim_err, Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    MeanRows(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    PickSum(NodeId, Vec<(usize, usize, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, NodeId>,
    relu_margin: f64,
    norm_spread: f64,
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            relu_margin: f64::INFINITY,
            norm_spread: f64::INFINITY,
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest |pre-activation| seen by any rectifier so far.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }

    /// Smallest standard deviation of any row normalized so far.
    pub fn norm_spread(&self) -> f64 {
        self.norm_spread
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        value.ensure_matrix("graph constant")?;
        Ok(self.push(value, Op::Constant))
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        let value = self.store.value(id).clone();
        let node = self.push(value, Op::Param(id));
        self.params.insert(id, node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(dim_err!("add of {:?} and {:?}", va.shape(), vb.shape()));
        }
        let v = va.zip_map(vb, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// `[r, c] + [1, c]` broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let v = self.broadcast_row(a, row, "add_row", |x, y| x + y)?;
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    /// `[r, c] ⊙ [1, c]` broadcast over rows.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let v = self.broadcast_row(a, row, "mul_row", |x, y| x * y)?;
        Ok(self.push(v, Op::MulRow(a, row)))
    }

    fn broadcast_row(
        &self,
        a: NodeId,
        row: NodeId,
        what: &str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(dim_err!(
                "{what}: row operand {:?} does not match {:?}",
                vr.shape(),
                va.shape()
            ));
        }
        let c = va.cols();
        let r = vr.data();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, r[i % c]))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(dim_err!("mul of {:?} and {:?}", va.shape(), vb.shape()));
        }
        let v = va.zip_map(vb, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let input = self.value(a);
        let margin = input
            .data()
            .iter()
            .map(|x| x.abs().as_f64())
            .fold(f64::INFINITY, f64::min);
        let v = input.map(|x| if x > T::zero() { x } else { T::zero() });
        self.relu_margin = self.relu_margin.min(margin);
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    /// Row-wise softmax. `mask[r * cols + c] == false` excludes the entry.
    pub fn softmax(&mut self, a: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let x = self.value(a);
        if let Some(m) = mask {
            if m.len() != x.len() {
                return Err(dim_err!(
                    "softmax mask of length {} for input {:?}",
                    m.len(),
                    x.shape()
                ));
            }
        }
        let v = softmax_rows(x, mask);
        Ok(self.push(v, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = x.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            data.extend(row.iter().map(|&v| v - lse));
        }
        let v = Tensor::matrix(r, c, data).expect("shape preserved");
        self.push(v, Op::LogSoftmax(a))
    }

    /// Normalizes each row over its columns, then applies `gamma`/`beta` ([1, c]).
    /// Population variance, `eps` inside the square root.
    pub fn layer_norm_rows(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        for (p, name) in [(gamma, "gamma"), (beta, "beta")] {
            let pv = self.value(p);
            if pv.rows() != 1 || pv.cols() != c {
                return Err(dim_err!(
                    "layer_norm {name} has shape {:?}, normalized axis has {c} entries",
                    pv.shape()
                ));
            }
        }
        // Statistics in f64: centering nearly constant rows cancels badly in f32.
        let n = c as f64;
        let mut normalized = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut spread = f64::INFINITY;
        for i in 0..r {
            let row: Vec<f64> = xv.row(i).iter().map(|v| v.as_f64()).collect();
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            if c > 1 {
                spread = spread.min(var.sqrt());
            }
            inv_std.push(T::of(inv));
            normalized.extend(row.iter().map(|v| T::of((v - mean) * inv)));
        }
        self.norm_spread = self.norm_spread.min(spread);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let data = normalized
            .iter()
            .enumerate()
            .map(|(k, &h)| h * g[k % c] + b[k % c])
            .collect();
        let v = Tensor::matrix(r, c, data)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        ))
    }

    /// Column means: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(dim_err!("mean over zero rows"));
        }
        let (r, c) = (x.rows(), x.cols());
        let inv = T::one() / T::of(r as f64);
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(x.row(i)) {
                *o = *o + v;
            }
        }
        out.iter_mut().for_each(|o| *o = *o * inv);
        Ok(self.push(Tensor::row_vector(&out), Op::MeanRows(a)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&values)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = self.value(a);
        if start + len > x.cols() {
            return Err(dim_err!(
                "slice_cols {start}..{} of {:?}",
                start + len,
                x.shape()
            ));
        }
        let v = x.slice_cols(start, len);
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    /// Rows of `a` picked by index (embedding lookup).
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::Data(format!(
                "row index {bad} out of range for {} rows",
                x.rows()
            )));
        }
        let v = x.select_rows(idx);
        Ok(self.push(v, Op::GatherRows(a, idx.to_vec())))
    }

    /// `Σ w · a[r, c]` over `(r, c, w)` entries, as a `[1, 1]` scalar.
    pub fn pick_sum(&mut self, a: NodeId, picks: Vec<(usize, usize, T)>) -> Result<NodeId> {
        let x = self.value(a);
        let mut s = T::zero();
        for &(r, c, w) in &picks {
            if r >= x.rows() || c >= x.cols() {
                return Err(dim_err!("pick ({r}, {c}) outside {:?}", x.shape()));
            }
            s = s + w * x.get(r, c);
        }
        Ok(self.push(Tensor::row_vector(&[s]), Op::PickSum(a, picks)))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let picks = (0..x.rows())
            .flat_map(|r| (0..x.cols()).map(move |c| (r, c, T::one())))
            .collect();
        self.pick_sum(a, picks)
    }

    /// Reverse pass from a `[1, 1]` node. Returns gradients for every
    /// parameter that the node depends on.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(dim_err!("backward needs a scalar, got {:?}", lv.shape()));
        }
        if !lv.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {}",
                lv.data()[0]
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        let mut out = vec![None; self.store.len()];

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(pid) => out[pid.0] = Some(dy),
                Op::MatMul(a, b) => {
                    let ga = dy.matmul_t(self.value(*b))?;
                    let gb = self.value(*a).t_matmul(&dy)?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, dy.transpose()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy);
                }
                Op::AddRow(a, row) => {
                    let gr = column_sums(&dy);
                    acc(&mut grads, *a, dy);
                    acc(&mut grads, *row, gr);
                }
                Op::MulRow(a, row) => {
                    let xa = self.value(*a);
                    let r = self.value(*row).data();
                    let c = xa.cols();
                    let mut gr = vec![T::zero(); c];
                    let mut ga = Vec::with_capacity(dy.len());
                    for (k, (&g, &x)) in dy.data().iter().zip(xa.data()).enumerate() {
                        ga.push(g * r[k % c]);
                        gr[k % c] = gr[k % c] + g * x;
                    }
                    acc(&mut grads, *a, Tensor::new(dy.shape().to_vec(), ga)?);
                    acc(&mut grads, *row, Tensor::row_vector(&gr));
                }
                Op::Mul(a, b) => {
                    let ga = dy.zip_map(self.value(*b), |g, y| g * y);
                    let gb = dy.zip_map(self.value(*a), |g, x| g * x);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, dy.map(|g| g * s));
                }
                Op::Relu(a) => {
                    let g = dy.zip_map(self.value(*a), |g, x| if x > T::zero() { g } else { T::zero() });
                    acc(&mut grads, *a, g);
                }
                Op::Sigmoid(a) => {
                    let g = dy.zip_map(&node.value, |g, y| g * y * (T::one() - y));
                    acc(&mut grads, *a, g);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut g = Vec::with_capacity(y.len());
                    for i in 0..y.rows() {
                        let (yr, dr) = (y.row(i), &dy.data()[i * c..(i + 1) * c]);
                        let dot = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum::<T>();
                        g.extend(yr.iter().zip(dr).map(|(&p, &d)| p * (d - dot)));
                    }
                    acc(&mut grads, *a, Tensor::new(y.shape().to_vec(), g)?);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut g = Vec::with_capacity(y.len());
                    for i in 0..y.rows() {
                        let (yr, dr) = (y.row(i), &dy.data()[i * c..(i + 1) * c]);
                        let total = dr.iter().copied().sum::<T>();
                        g.extend(yr.iter().zip(dr).map(|(&l, &d)| d - l.exp() * total));
                    }
                    acc(&mut grads, *a, Tensor::new(y.shape().to_vec(), g)?);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                } => {
                    let (r, c) = (dy.rows(), dy.cols());
                    let gv = self.value(*gamma).data();
                    let n = T::of(c as f64);
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    let mut dx = Vec::with_capacity(r * c);
                    for i in 0..r {
                        let d = &dy.data()[i * c..(i + 1) * c];
                        let h = &normalized[i * c..(i + 1) * c];
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..c {
                            dgamma[j] = dgamma[j] + d[j] * h[j];
                            dbeta[j] = dbeta[j] + d[j];
                            let dh = d[j] * gv[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * h[j];
                        }
                        let k = inv_std[i] / n;
                        for j in 0..c {
                            let dh = d[j] * gv[j];
                            dx.push(k * (n * dh - sum_dh - h[j] * sum_dh_h));
                        }
                    }
                    acc(&mut grads, *x, Tensor::matrix(r, c, dx)?);
                    acc(&mut grads, *gamma, Tensor::row_vector(&dgamma));
                    acc(&mut grads, *beta, Tensor::row_vector(&dbeta));
                }
                Op::MeanRows(a) => {
                    let r = self.value(*a).rows();
                    let inv = T::one() / T::of(r as f64);
                    let row: Vec<T> = dy.data().iter().map(|&g| g * inv).collect();
                    let g = Tensor::from_fn(r, row.len(), |_, j| row[j]);
                    acc(&mut grads, *a, g);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        acc(&mut grads, *p, dy.slice_cols(start, w));
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let (r, c, w) = (src.rows(), src.cols(), dy.cols());
                    let mut g = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        for j in 0..w {
                            g.set(i, start + j, dy.get(i, j));
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::GatherRows(a, idx) => {
                    let src = self.value(*a);
                    let c = src.cols();
                    let mut g = Tensor::zeros(src.shape());
                    for (k, &i) in idx.iter().enumerate() {
                        let dst = &mut g.data_mut()[i * c..(i + 1) * c];
                        for (o, &v) in dst.iter_mut().zip(dy.row(k)) {
                            *o = *o + v;
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::PickSum(a, picks) => {
                    let scale = dy.data()[0];
                    let mut g = Tensor::zeros(self.value(*a).shape());
                    for &(r, c, w) in picks {
                        let v = g.get(r, c);
                        g.set(r, c, v + w * scale);
                    }
                    acc(&mut grads, *a, g);
                }
            }
        }
        Ok(Gradients(out))
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let c = t.cols();
    let mut out = vec![T::zero(); c];
    for i in 0..t.rows() {
        for (o, &v) in out.iter_mut().zip(t.row(i)) {
            *o = *o + v;
        }
    }
    Tensor::row_vector(&out)
}

/// Max-subtracted row softmax; masked entries get probability zero.
pub(crate) fn softmax_rows<T: Scalar>(x: &Tensor<T>, mask: Option<&[bool]>) -> Tensor<T> {
    let (r, c) = (x.rows(), x.cols());
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = x.row(i);
        let keep = |j: usize| mask.is_none_or(|m| m[i * c + j]);
        let max = (0..c)
            .filter(|&j| keep(j))
            .map(|j| row[j].as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = (0..c)
            .map(|j| if keep(j) { (row[j].as_f64() - max).exp() } else { 0.0 })
            .collect();
        let total: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|&e| T::of(e / total)));
    }
    Tensor::matrix(r, c, data).expect("shape preserved")
}
