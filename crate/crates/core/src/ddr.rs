//! Dual-dimensional refining: non-local self-attention along positions and
//! along channels, combined in parallel or in cascade, with a position-wise
//! feed-forward network after every layer.
//!
//! Each attention branch is normalized along the axis it attends over:
//! spatial branches along positions, channel branches along channels.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{FeedForward, LayerNorm, MultiHeadAttention, NormAxis};
use crate::params::ParamStore;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    Spatial,
    Channel,
    Parallel,
    #[default]
    Cascade,
    None,
}

impl RefineMode {
    pub const ALL: [RefineMode; 4] = [
        RefineMode::Spatial,
        RefineMode::Channel,
        RefineMode::Parallel,
        RefineMode::Cascade,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RefineMode::Spatial => "spatial",
            RefineMode::Channel => "channel",
            RefineMode::Parallel => "parallel",
            RefineMode::Cascade => "cascade",
            RefineMode::None => "none",
        }
    }
}

impl fmt::Display for RefineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RefineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(RefineMode::Spatial),
            "channel" => Ok(RefineMode::Channel),
            "parallel" => Ok(RefineMode::Parallel),
            "cascade" => Ok(RefineMode::Cascade),
            "none" => Ok(RefineMode::None),
            other => Err(Error::Config(format!(
                "unknown refine mode {other:?} (expected spatial, channel, parallel, cascade or none)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    pub mode: RefineMode,
    pub layers: usize,
    /// Heads of the spatial branch.
    pub heads: usize,
    /// Heads of the channel branch; must divide the position count.
    #[serde(default = "one")]
    pub channel_heads: usize,
}

fn one() -> usize {
    1
}

impl RefineConfig {
    pub fn none() -> Self {
        Self {
            mode: RefineMode::None,
            layers: 0,
            heads: 1,
            channel_heads: 1,
        }
    }

    pub fn is_passthrough(&self) -> bool {
        self.mode == RefineMode::None || self.layers == 0
    }

    pub fn validate(&self, d_model: usize, positions: usize) -> Result<()> {
        if self.is_passthrough() {
            return Ok(());
        }
        if self.heads == 0 || !d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "refine heads {} must divide d_model {d_model}",
                self.heads
            )));
        }
        if self.channel_heads == 0 || !positions.is_multiple_of(self.channel_heads) {
            return Err(Error::Config(format!(
                "channel heads {} must divide the position count {positions}",
                self.channel_heads
            )));
        }
        Ok(())
    }
}

/// `LayerNorm_positions(MHA(X, X)) + X`.
#[derive(Clone, Debug)]
pub struct SpatialBlock {
    pub attention: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl SpatialBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        positions: usize,
        d_model: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, heads, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), positions, NormAxis::Positions)?,
        })
    }

    /// Output and per-head `[n, n]` attention maps.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        let (a, probs) = self.attention.forward(g, x, x, None)?;
        let n = self.norm.forward(g, a)?;
        Ok((g.add(n, x)?, probs))
    }
}

/// Channels act as tokens: attention over `Xᵀ` with keys of length `n`, then
/// `LayerNorm_channels(·) + X`.
#[derive(Clone, Debug)]
pub struct ChannelBlock {
    pub attention: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl ChannelBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        positions: usize,
        d_model: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), positions, heads, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d_model, NormAxis::Channels)?,
        })
    }

    /// Output and per-head `[d, d]` attention maps.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        let xt = g.transpose(x);
        let (a, probs) = self.attention.forward(g, xt, xt, None)?;
        let a = g.transpose(a);
        let n = self.norm.forward(g, a)?;
        Ok((g.add(n, x)?, probs))
    }
}

/// Attention maps recorded by one refining layer.
#[derive(Clone, Debug, Default)]
pub struct LayerTrace {
    pub spatial: Vec<NodeId>,
    pub channel: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct DdrLayer {
    pub mode: RefineMode,
    pub spatial: Option<SpatialBlock>,
    pub channel: Option<ChannelBlock>,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl DdrLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &RefineConfig,
        positions: usize,
        d_model: usize,
        d_ff: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mode = cfg.mode;
        let spatial = matches!(
            mode,
            RefineMode::Spatial | RefineMode::Parallel | RefineMode::Cascade
        )
        .then(|| SpatialBlock::new(store, &format!("{name}.spatial"), positions, d_model, cfg.heads, rng))
        .transpose()?;
        let channel = matches!(
            mode,
            RefineMode::Channel | RefineMode::Parallel | RefineMode::Cascade
        )
        .then(|| {
            ChannelBlock::new(
                store,
                &format!("{name}.channel"),
                positions,
                d_model,
                cfg.channel_heads,
                rng,
            )
        })
        .transpose()?;
        Ok(Self {
            mode,
            spatial,
            channel,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d_model, d_ff, rng)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d_model, NormAxis::Channels)?,
        })
    }

    fn spatial<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId, t: &mut LayerTrace) -> Result<NodeId> {
        let block = self.spatial.as_ref().expect("mode has a spatial branch");
        let (y, p) = block.forward(g, x)?;
        t.spatial = p;
        Ok(y)
    }

    fn channel<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId, t: &mut LayerTrace) -> Result<NodeId> {
        let block = self.channel.as_ref().expect("mode has a channel branch");
        let (y, p) = block.forward(g, x)?;
        t.channel = p;
        Ok(y)
    }

    /// The mode's attention block without the feed-forward stage.
    pub fn refine<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> Result<(NodeId, LayerTrace)> {
        let mut t = LayerTrace::default();
        let y = match self.mode {
            RefineMode::Spatial => self.spatial(g, x, &mut t)?,
            RefineMode::Channel => self.channel(g, x, &mut t)?,
            RefineMode::Parallel => {
                let s = self.spatial(g, x, &mut t)?;
                let c = self.channel(g, x, &mut t)?;
                let sc = g.add(s, c)?;
                g.add(sc, x)?
            }
            RefineMode::Cascade => {
                let s = self.spatial(g, x, &mut t)?;
                self.channel(g, s, &mut t)?
            }
            RefineMode::None => x,
        };
        Ok((y, t))
    }

    /// Refining block, then `LayerNorm(FFN(Y) + Y)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> Result<(NodeId, LayerTrace)> {
        let (y, t) = self.refine(g, x)?;
        let f = self.ffn.forward(g, y)?;
        let r = g.add(f, y)?;
        Ok((self.ffn_norm.forward(g, r)?, t))
    }
}

/// `N` stacked refining layers. Zero layers or mode `none` is the identity.
#[derive(Clone, Debug)]
pub struct Ddr {
    pub config: RefineConfig,
    pub positions: usize,
    pub d_model: usize,
    pub layers: Vec<DdrLayer>,
}

impl Ddr {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &RefineConfig,
        positions: usize,
        d_model: usize,
        d_ff: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate(d_model, positions)?;
        let count = if cfg.is_passthrough() { 0 } else { cfg.layers };
        let layers = (0..count)
            .map(|i| DdrLayer::new(store, &format!("{name}.layer{i}"), cfg, positions, d_model, d_ff, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: cfg.clone(),
            positions,
            d_model,
            layers,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId) -> Result<(NodeId, Vec<LayerTrace>)> {
        let shape = g.value(x).shape();
        if self.layers.is_empty() {
            return Ok((x, Vec::new()));
        }
        if shape != [self.positions, self.d_model] {
            return Err(dim_err!(
                "refining expects [{}, {}], got {:?}",
                self.positions,
                self.d_model,
                shape
            ));
        }
        let mut h = x;
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, t) = layer.forward(g, h)?;
            h = y;
            traces.push(t);
        }
        Ok((h, traces))
    }
}
