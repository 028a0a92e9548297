//! The full captioner: multi-sight alignment, DMSE, DDR and the decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Aligner, GridFeatureSet, NUM_LEVELS};
use crate::ddr::{Ddr, LayerTrace, RefineConfig, RefineMode};
use crate::decoder::{Decoder, DecoderConfig, DecoderStep};
use crate::dmse::{Dmse, SqueezeMode};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    /// Gate the concatenated multi-sight features; without it only the last
    /// level feeds the encoder.
    pub use_dmse: bool,
    /// `d_c = 4 · d_model / bottleneck_ratio`.
    pub bottleneck_ratio: usize,
    pub squeeze: SqueezeMode,
    pub refine: RefineConfig,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_ff: 256,
            decoder_layers: 1,
            decoder_heads: 2,
            use_dmse: true,
            bottleneck_ratio: 4,
            squeeze: SqueezeMode::Pool,
            refine: RefineConfig {
                mode: RefineMode::Cascade,
                layers: 1,
                heads: 2,
                channel_heads: 1,
            },
            max_len: crate::data::MAX_CAPTION_LEN,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, positions: usize) -> Result<()> {
        if self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Config("d_model and d_ff must be positive".into()));
        }
        if self.bottleneck_ratio == 0 || !(NUM_LEVELS * self.d_model).is_multiple_of(self.bottleneck_ratio) {
            return Err(Error::Config(format!(
                "bottleneck ratio {} must divide {}",
                self.bottleneck_ratio,
                NUM_LEVELS * self.d_model
            )));
        }
        self.refine.validate(self.d_model, positions)
    }

    pub fn decoder(&self, vocab_size: usize) -> DecoderConfig {
        DecoderConfig {
            layers: self.decoder_layers,
            heads: self.decoder_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            max_len: self.max_len,
            vocab_size,
        }
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub levels: Vec<(usize, usize)>,
    pub vocab_size: usize,
}

/// Intermediate encoder values kept for inspection.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    pub multi_sight: Option<NodeId>,
    pub gate: Option<NodeId>,
    pub embedded: Option<NodeId>,
    pub layers: Vec<LayerTrace>,
}

#[derive(Clone, Debug)]
pub struct Captioner {
    pub spec: ModelSpec,
    pub aligner: Aligner,
    pub dmse: Option<Dmse>,
    pub ddr: Ddr,
    pub decoder: Decoder,
}

impl Captioner {
    /// Registers all parameters in `store`, initialized from `seed`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, spec: &ModelSpec, seed: u64) -> Result<Self> {
        let cfg = &spec.config;
        if spec.levels.len() != NUM_LEVELS {
            return Err(Error::Config(format!("expected {NUM_LEVELS} feature levels")));
        }
        let positions = spec.levels[NUM_LEVELS - 1].0;
        cfg.validate(positions)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let aligner = Aligner::new(store, "align", &spec.levels, cfg.d_model, &mut rng)?;
        let dmse = if cfg.use_dmse {
            let channels = NUM_LEVELS * cfg.d_model;
            Some(Dmse::new(
                store,
                "dmse",
                channels,
                channels / cfg.bottleneck_ratio,
                cfg.d_model,
                positions,
                cfg.squeeze,
                &mut rng,
            )?)
        } else {
            None
        };
        let ddr = Ddr::new(store, "ddr", &cfg.refine, positions, cfg.d_model, cfg.d_ff, &mut rng)?;
        let decoder = Decoder::new(store, "decoder", &cfg.decoder(spec.vocab_size), &mut rng)?;
        Ok(Self {
            spec: spec.clone(),
            aligner,
            dmse,
            ddr,
            decoder,
        })
    }

    pub fn max_len(&self) -> usize {
        self.spec.config.max_len
    }

    /// Encoder output `[positions, d_model]` plus its trace.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        features: &GridFeatureSet,
    ) -> Result<(NodeId, EncoderTrace)> {
        let mut trace = EncoderTrace {
            multi_sight: None,
            gate: None,
            embedded: None,
            layers: Vec::new(),
        };
        let x = match &self.dmse {
            Some(dmse) => {
                let m = self.aligner.forward(g, features)?;
                let out = dmse.forward(g, m)?;
                trace.multi_sight = Some(m);
                trace.gate = Some(out.gate);
                trace.embedded = Some(out.embedded);
                out.fused
            }
            None => self.aligner.project_level(g, features, NUM_LEVELS - 1)?,
        };
        let (y, layers) = self.ddr.forward(g, x)?;
        trace.layers = layers;
        Ok((y, trace))
    }

    /// Encoder output without recording gradients.
    pub fn memory<T: Scalar>(&self, store: &ParamStore<T>, features: &GridFeatureSet) -> Result<Tensor<T>> {
        let mut g = Graph::new(store);
        let (m, _) = self.encode(&mut g, features)?;
        Ok(g.value(m).clone())
    }

    pub fn stepper<'a, T: Scalar>(&'a self, store: &'a ParamStore<T>, memory: Tensor<T>) -> DecoderStep<'a, T> {
        self.decoder.stepper(store, memory)
    }

    /// Next-token logits for teacher-forced `tokens`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        features: &GridFeatureSet,
        tokens: &[usize],
    ) -> Result<NodeId> {
        let (memory, _) = self.encode(g, features)?;
        self.decoder.forward(g, tokens, memory)
    }
}
