//! Dynamic multi-sight embedding.
//!
//! The multi-sight matrix `M` is squeezed to one value per channel, excited
//! through a rectified bottleneck into a sigmoid gate `E`, and the gated
//! features are layer-normalized and added back onto `M`:
//!
//! ```text
//! V_s = mean_rows(M)
//! E   = σ(ρ(V_s W_down + b_down) W_up + b_up)
//! M_e = LayerNorm_channels(M ⊙ E) + M
//! ```
//!
//! A final linear map fuses the `4 · d_model` channels back to `d_model`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{LayerNorm, Linear, NormAxis};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SqueezeMode {
    /// Average pooling over positions.
    #[default]
    Pool,
    /// Learnable weighted sum over positions.
    Learnable,
}

#[derive(Clone, Debug)]
pub struct Dmse {
    pub channels: usize,
    pub bottleneck: usize,
    pub squeeze_mode: SqueezeMode,
    squeeze_weights: Option<ParamId>,
    pub down: Linear,
    pub up: Linear,
    pub norm: LayerNorm,
    pub fuse: Linear,
}

/// Intermediate values of one DMSE pass.
#[derive(Clone, Copy, Debug)]
pub struct DmseOutput {
    pub squeezed: NodeId,
    pub gate: NodeId,
    pub embedded: NodeId,
    pub fused: NodeId,
}

impl Dmse {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        bottleneck: usize,
        d_model: usize,
        positions: usize,
        squeeze_mode: SqueezeMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if bottleneck == 0 {
            return Err(crate::Error::Config("DMSE bottleneck width must be at least 1".into()));
        }
        let squeeze_weights = match squeeze_mode {
            SqueezeMode::Pool => None,
            SqueezeMode::Learnable => Some(store.add(
                format!("{name}.squeeze"),
                Tensor::full(&[1, positions], T::of(1.0 / positions as f64)),
            )?),
        };
        Ok(Self {
            channels,
            bottleneck,
            squeeze_mode,
            squeeze_weights,
            down: Linear::new(store, &format!("{name}.down"), channels, bottleneck, rng)?,
            up: Linear::new(store, &format!("{name}.up"), bottleneck, channels, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), channels, NormAxis::Channels)?,
            fuse: Linear::new(store, &format!("{name}.fuse"), channels, d_model, rng)?,
        })
    }

    /// One representative value per channel, `[1, channels]`.
    pub fn squeeze<T: Scalar>(&self, g: &mut Graph<T>, m: NodeId) -> Result<NodeId> {
        let shape = g.value(m).shape().to_vec();
        if shape[0] == 0 {
            return Err(dim_err!("cannot squeeze an empty feature matrix"));
        }
        if shape[1] != self.channels {
            return Err(dim_err!(
                "DMSE expects {} channels, got {}",
                self.channels,
                shape[1]
            ));
        }
        match self.squeeze_weights {
            None => g.mean_rows(m),
            Some(w) => {
                let w = g.param(w);
                g.matmul(w, m)
            }
        }
    }

    /// The correlation gate `E`, strictly inside `(0, 1)`.
    pub fn excite<T: Scalar>(&self, g: &mut Graph<T>, squeezed: NodeId) -> Result<NodeId> {
        let h = self.down.forward(g, squeezed)?;
        let h = g.relu(h);
        let e = self.up.forward(g, h)?;
        Ok(g.sigmoid(e))
    }

    /// `LayerNorm(M ⊙ E) + M` for an explicit gate.
    pub fn apply_gate<T: Scalar>(&self, g: &mut Graph<T>, m: NodeId, gate: NodeId) -> Result<NodeId> {
        let gv = g.value(gate);
        if gv.rows() != 1 || gv.cols() != g.value(m).cols() {
            return Err(dim_err!(
                "gate of shape {:?} does not match features {:?}",
                gv.shape(),
                g.value(m).shape()
            ));
        }
        let gated = g.mul_row(m, gate)?;
        let normed = self.norm.forward(g, gated)?;
        g.add(normed, m)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, m: NodeId) -> Result<DmseOutput> {
        let squeezed = self.squeeze(g, m)?;
        let gate = self.excite(g, squeezed)?;
        let embedded = self.apply_gate(g, m, gate)?;
        let fused = self.fuse.forward(g, embedded)?;
        Ok(DmseOutput {
            squeezed,
            gate,
            embedded,
            fused,
        })
    }
}
