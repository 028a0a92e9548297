//! Layers shared by the encoder and decoder: linear maps, layer norm, the
//! position-wise feed-forward network and (multi-head) scaled dot-product
//! attention. Each layer records itself on a [`Graph`]; the free functions at
//! the bottom evaluate one op on plain tensors.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add_xavier(format!("{name}.weight"), in_dim, out_dim, rng)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let cols = g.value(x).cols();
        if cols != self.in_dim {
            return Err(dim_err!(
                "linear input has {cols} features, weight expects {}",
                self.in_dim
            ));
        }
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}

/// Which axis of a `[positions, channels]` matrix a norm runs along.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormAxis {
    /// Statistics over positions, one per channel.
    Positions,
    /// Statistics over channels, one per position.
    Channels,
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub axis: NormAxis,
    pub eps: f64,
}

impl LayerNorm {
    /// `size` is the length of the normalized axis.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        size: usize,
        axis: NormAxis,
    ) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[1, size], T::one()))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[1, size]))?;
        Ok(Self {
            gamma,
            beta,
            axis,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        match self.axis {
            NormAxis::Channels => g.layer_norm_rows(x, gamma, beta, self.eps),
            NormAxis::Positions => {
                let xt = g.transpose(x);
                let y = g.layer_norm_rows(xt, gamma, beta, self.eps)?;
                Ok(g.transpose(y))
            }
        }
    }
}

/// `max(0, X W1 + b1) W2 + b2`, applied to every row independently.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, &format!("{name}.inner"), d_model, d_ff, rng)?,
            outer: Linear::new(store, &format!("{name}.outer"), d_ff, d_model, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let h = self.inner.forward(g, x)?;
        let h = g.relu(h);
        self.outer.forward(g, h)
    }
}

/// `softmax(Q Kᵀ / scale) V`, with `mask[i * keys + j] == false` blocking
/// query `i` from key `j`.
pub fn attend<T: Scalar>(
    g: &mut Graph<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    scale: f64,
    mask: Option<&[bool]>,
) -> Result<(NodeId, NodeId)> {
    if scale <= 0.0 {
        return Err(Error::Config(format!("attention scale must be positive, got {scale}")));
    }
    let (qd, kd) = (g.value(q).cols(), g.value(k).cols());
    if qd != kd {
        return Err(dim_err!("attention queries have width {qd}, keys {kd}"));
    }
    if g.value(k).rows() != g.value(v).rows() {
        return Err(dim_err!(
            "attention has {} keys but {} values",
            g.value(k).rows(),
            g.value(v).rows()
        ));
    }
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::of(1.0 / scale));
    let probs = g.softmax(scores, mask)?;
    Ok((g.matmul(probs, v)?, probs))
}

/// Standard multi-head attention: per-head slices of the Q/K/V projections,
/// scaled by √d_head, concatenated and projected back.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), width, width, rng)?,
            key: Linear::new(store, &format!("{name}.key"), width, width, rng)?,
            value: Linear::new(store, &format!("{name}.value"), width, width, rng)?,
            output: Linear::new(store, &format!("{name}.output"), width, width, rng)?,
            heads,
        })
    }

    /// Returns the output and the per-head attention probability nodes.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        queries: NodeId,
        keys_values: NodeId,
        mask: Option<&[bool]>,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, keys_values)?;
        let v = self.value.forward(g, keys_values)?;
        let width = self.query.out_dim;
        let d_head = width / self.heads;
        let scale = (d_head as f64).sqrt();
        if self.heads == 1 {
            let (out, probs) = attend(g, q, k, v, scale, mask)?;
            return Ok((self.output.forward(g, out)?, vec![probs]));
        }
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * d_head, d_head)?;
            let kh = g.slice_cols(k, h * d_head, d_head)?;
            let vh = g.slice_cols(v, h * d_head, d_head)?;
            let (o, p) = attend(g, qh, kh, vh, scale, mask)?;
            outs.push(o);
            probs.push(p);
        }
        let cat = g.concat_cols(&outs)?;
        Ok((self.output.forward(g, cat)?, probs))
    }
}

/// Boolean causal mask for `t` positions: query `i` may see keys `0..=i`.
pub fn causal_mask(t: usize) -> Vec<bool> {
    (0..t * t).map(|k| k % t <= k / t).collect()
}

fn as_matrix<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    match x.shape().len() {
        1 => Ok(Tensor::row_vector(x.data())),
        2 => Ok(x.clone()),
        _ => Err(dim_err!("expected a vector or matrix, got {:?}", x.shape())),
    }
}

fn reshape_like<T: Scalar>(y: &Tensor<T>, like: &Tensor<T>) -> Tensor<T> {
    if like.shape().len() == 1 {
        Tensor::new(vec![y.len()], y.data().to_vec()).expect("same length")
    } else {
        y.clone()
    }
}

/// `x W + b` over the last dimension of `x`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let xm = as_matrix(x)?;
    let wm = as_matrix(w)?;
    if xm.cols() != wm.rows() {
        return Err(dim_err!(
            "linear: x has last dimension {} but W has {} rows",
            xm.cols(),
            wm.rows()
        ));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let xn = g.constant(xm)?;
    let wn = g.constant(wm)?;
    let bn = g.constant(as_matrix(b)?)?;
    let y = g.matmul(xn, wn)?;
    let y = g.add_row(y, bn)?;
    Ok(reshape_like(g.value(y), x))
}

/// Layer norm along `axis` (0 or 1 for matrices, 0 for vectors).
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let rank = x.shape().len();
    if axis >= rank {
        return Err(dim_err!("axis {axis} out of range for rank {rank}"));
    }
    let xm = as_matrix(x)?;
    let transpose = rank == 2 && axis == 0;
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let xn = g.constant(if transpose { xm.transpose() } else { xm })?;
    let gn = g.constant(as_matrix(gamma)?)?;
    let bn = g.constant(as_matrix(beta)?)?;
    let y = g.layer_norm_rows(xn, gn, bn, eps)?;
    let y = g.value(y);
    Ok(reshape_like(&if transpose { y.transpose() } else { y.clone() }, x))
}

/// Softmax along `axis` (0 or 1 for matrices, 0 for vectors).
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let rank = x.shape().len();
    if axis >= rank {
        return Err(dim_err!("axis {axis} out of range for rank {rank}"));
    }
    let xm = as_matrix(x)?;
    let y = if rank == 2 && axis == 0 {
        crate::graph::softmax_rows(&xm.transpose(), None).transpose()
    } else {
        crate::graph::softmax_rows(&xm, None)
    };
    Ok(reshape_like(&y, x))
}

/// Position-wise feed-forward network with explicit weights.
pub fn ffn<T: Scalar>(
    x: &Tensor<T>,
    w1: &Tensor<T>,
    b1: &Tensor<T>,
    w2: &Tensor<T>,
    b2: &Tensor<T>,
) -> Result<Tensor<T>> {
    let h = linear(x, w1, b1)?;
    let h = h.map(|v| v.max(T::zero()));
    linear(&h, w2, b2)
}

/// `softmax(Q Kᵀ / scale) V` on plain tensors.
pub fn scaled_dot_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    scale: f64,
    mask: Option<&[bool]>,
) -> Result<Tensor<T>> {
    if let Some(m) = mask {
        if m.len() != q.rows() * k.rows() {
            return Err(dim_err!(
                "mask has {} entries, expected {}x{}",
                m.len(),
                q.rows(),
                k.rows()
            ));
        }
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (qn, kn, vn) = (
        g.constant(q.clone())?,
        g.constant(k.clone())?,
        g.constant(v.clone())?,
    );
    let (out, _) = attend(&mut g, qn, kn, vn, scale, mask)?;
    Ok(g.value(out).clone())
}
