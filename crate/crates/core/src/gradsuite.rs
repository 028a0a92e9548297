//! Finite-difference checks for every trainable block on random toy
//! configurations, in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BOS, EOS, PAD};
use crate::ddr::{Ddr, RefineConfig, RefineMode};
use crate::decoder::{Decoder, DecoderConfig};
use crate::dmse::{Dmse, SqueezeMode};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_resampled, Checkable, GradCheckOptions, GradCheckReport};
use crate::graph::{Graph, NodeId};
use crate::nn::{causal_mask, FeedForward, LayerNorm, Linear, MultiHeadAttention, NormAxis};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::training::{scst_advantages, scst_surrogate, xe_loss};

pub const BLOCKS: [&str; 15] = [
    "linear",
    "layer_norm_channels",
    "layer_norm_positions",
    "ffn",
    "attention",
    "dmse",
    "dmse_learnable_squeeze",
    "ddr_spatial",
    "ddr_channel",
    "ddr_parallel",
    "ddr_cascade",
    "decoder",
    "xe_loss",
    "scst_surrogate",
    "full_model",
];

type LossFn = Box<dyn Fn(&mut Graph<f64>) -> Result<NodeId>>;

/// A parameter store and a scalar loss over it.
pub struct Case {
    store: ParamStore<f64>,
    loss: LossFn,
}

impl Checkable for Case {
    fn store(&self) -> &ParamStore<f64> {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.store
    }
    fn loss(&self, g: &mut Graph<f64>) -> Result<NodeId> {
        (self.loss)(g)
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.2..1.2));
    }
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output element matters.
fn project(g: &mut Graph<f64>, y: NodeId, r: &Tensor<f64>) -> Result<NodeId> {
    let c = g.constant(r.clone())?;
    let m = g.mul(y, c)?;
    g.sum_all(m)
}

fn input(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<ParamId> {
    store.add("input", random(rng, rows, cols))
}

fn finish(mut store: ParamStore<f64>, rng: &mut ChaCha8Rng, rows: usize, cols: usize, f: impl Fn(&mut Graph<f64>) -> Result<NodeId> + 'static) -> Case {
    randomize(&mut store, rng);
    let r = random(rng, rows, cols);
    Case {
        store,
        loss: Box::new(move |g| {
            let y = f(g)?;
            project(g, y, &r)
        }),
    }
}

fn pick(rng: &mut ChaCha8Rng, options: &[usize]) -> usize {
    options[rng.random_range(0..options.len())]
}

/// Builds the check case of `block` for one random configuration.
pub fn make_case(block: &str, seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let rows = rng.random_range(1..=4);
    match block {
        "linear" => {
            let (i, o) = (rng.random_range(1..=5), rng.random_range(1..=5));
            let lin = Linear::new(&mut store, "lin", i, o, &mut rng)?;
            let x = input(&mut store, &mut rng, rows, i)?;
            Ok(finish(store, &mut rng, rows, o, move |g| {
                let x = g.param(x);
                lin.forward(g, x)
            }))
        }
        "layer_norm_channels" | "layer_norm_positions" => {
            let rows = rng.random_range(2..=5);
            let cols = rng.random_range(2..=5);
            let (axis, size) = if block == "layer_norm_channels" {
                (NormAxis::Channels, cols)
            } else {
                (NormAxis::Positions, rows)
            };
            let ln = LayerNorm::new(&mut store, "ln", size, axis)?;
            let x = input(&mut store, &mut rng, rows, cols)?;
            Ok(finish(store, &mut rng, rows, cols, move |g| {
                let x = g.param(x);
                ln.forward(g, x)
            }))
        }
        "ffn" => {
            let d = rng.random_range(1..=5);
            let ff = FeedForward::new(&mut store, "ffn", d, rng.random_range(2..=6), &mut rng)?;
            let x = input(&mut store, &mut rng, rows, d)?;
            Ok(finish(store, &mut rng, rows, d, move |g| {
                let x = g.param(x);
                ff.forward(g, x)
            }))
        }
        "attention" => {
            let heads = pick(&mut rng, &[1, 2]);
            let width = heads * rng.random_range(1..=3);
            let mha = MultiHeadAttention::new(&mut store, "mha", width, heads, &mut rng)?;
            let tq = rng.random_range(1..=4);
            let tk = if rng.random_bool(0.5) { tq } else { rng.random_range(1..=4) };
            let mask = (tq == tk).then(|| causal_mask(tq));
            let q = input(&mut store, &mut rng, tq, width)?;
            let kv = store.add("keys", random(&mut rng, tk, width))?;
            Ok(finish(store, &mut rng, tq, width, move |g| {
                let q = g.param(q);
                let kv = g.param(kv);
                Ok(mha.forward(g, q, kv, mask.as_deref())?.0)
            }))
        }
        "dmse" | "dmse_learnable_squeeze" => {
            let channels = 4 * rng.random_range(1..=2);
            let d = rng.random_range(1..=4);
            let positions = rng.random_range(1..=4);
            let mode = if block == "dmse" { SqueezeMode::Pool } else { SqueezeMode::Learnable };
            let dm = Dmse::new(&mut store, "dmse", channels, channels / 4, d, positions, mode, &mut rng)?;
            let m = input(&mut store, &mut rng, positions, channels)?;
            Ok(finish(store, &mut rng, positions, d, move |g| {
                let m = g.param(m);
                Ok(dm.forward(g, m)?.fused)
            }))
        }
        "ddr_spatial" | "ddr_channel" | "ddr_parallel" | "ddr_cascade" => {
            let mode: RefineMode = block.trim_start_matches("ddr_").parse()?;
            let heads = pick(&mut rng, &[1, 2]);
            let d = heads * rng.random_range(1..=3);
            let positions = pick(&mut rng, &[4, 6]);
            let cfg = RefineConfig {
                mode,
                layers: rng.random_range(1..=2),
                heads,
                channel_heads: pick(&mut rng, &[1, 2]),
            };
            let ddr = Ddr::new(&mut store, "ddr", &cfg, positions, d, rng.random_range(2..=6), &mut rng)?;
            let x = input(&mut store, &mut rng, positions, d)?;
            Ok(finish(store, &mut rng, positions, d, move |g| {
                let x = g.param(x);
                Ok(ddr.forward(g, x)?.0)
            }))
        }
        "decoder" => {
            let (dec, mem, vocab) = toy_decoder(&mut store, &mut rng)?;
            let t = rng.random_range(1..=4);
            let mut tokens = vec![BOS];
            tokens.extend((1..t).map(|_| rng.random_range(0..vocab)));
            Ok(finish(store, &mut rng, t, vocab, move |g| {
                let m = g.param(mem);
                dec.forward(g, &tokens, m)
            }))
        }
        "xe_loss" => {
            let t = rng.random_range(1..=5);
            let v = rng.random_range(2..=6);
            let logits = store.add("logits", random(&mut rng, t, v))?;
            let mut targets: Vec<usize> = (0..t).map(|_| rng.random_range(0..v)).collect();
            targets[0] = rng.random_range(1..v);
            if t > 1 && rng.random_bool(0.5) {
                targets[t - 1] = PAD;
            }
            Ok(Case {
                store,
                loss: Box::new(move |g| {
                    let l = g.param(logits);
                    xe_loss(g, l, &targets)
                }),
            })
        }
        "scst_surrogate" => {
            let (dec, mem, vocab) = toy_decoder(&mut store, &mut rng)?;
            randomize(&mut store, &mut rng);
            let n = rng.random_range(2..=4);
            let samples: Vec<Vec<usize>> = (0..n)
                .map(|_| {
                    let len = rng.random_range(1..=4);
                    let mut s = vec![BOS];
                    s.extend((0..len).map(|_| rng.random_range(3..vocab)));
                    s.push(EOS);
                    s
                })
                .collect();
            let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
            let (_, adv) = scst_advantages(&rewards, None)?;
            Ok(Case {
                store,
                loss: Box::new(move |g| {
                    let m = g.param(mem);
                    scst_surrogate(g, &dec, m, &samples, &adv)?
                        .ok_or_else(|| Error::Numerical("all advantages vanished".into()))
                }),
            })
        }
        "full_model" => full_model_case(&mut rng),
        other => Err(Error::Config(format!("unknown block {other:?}"))),
    }
}

fn toy_decoder(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) -> Result<(Decoder, ParamId, usize)> {
    let heads = pick(rng, &[1, 2]);
    let cfg = DecoderConfig {
        layers: 1,
        heads,
        d_model: heads * rng.random_range(1..=2),
        d_ff: rng.random_range(2..=4),
        max_len: 4,
        vocab_size: rng.random_range(4..=6),
    };
    let dec = Decoder::new(store, "dec", &cfg, rng)?;
    let positions = rng.random_range(1..=3);
    let mem = store.add("memory", random(rng, positions, cfg.d_model))?;
    Ok((dec, mem, cfg.vocab_size))
}

fn full_model_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    use crate::backbone::GridFeatureSet;
    use crate::model::{Captioner, ModelConfig, ModelSpec};
    let levels = vec![(16, 2), (4, 2), (1, 3), (1, 2)];
    let mode = RefineMode::ALL[rng.random_range(0..4)];
    let spec = ModelSpec {
        config: ModelConfig {
            d_model: 2,
            d_ff: 3,
            decoder_heads: 1,
            refine: RefineConfig {
                mode,
                layers: 1,
                heads: 1,
                channel_heads: 1,
            },
            ..Default::default()
        },
        levels: levels.clone(),
        vocab_size: 5,
    };
    let mut store = ParamStore::new();
    let model = Captioner::new(&mut store, &spec, rng.random())?;
    randomize(&mut store, rng);
    let feats = GridFeatureSet::new(
        levels
            .iter()
            .map(|&(n, c)| random(rng, n, c).cast())
            .collect(),
    )?;
    let tokens = [BOS, 3, 4, EOS];
    Ok(Case {
        store,
        loss: Box::new(move |g| {
            let l = model.forward(g, &feats, &tokens[..3])?;
            xe_loss(g, l, &tokens[1..])
        }),
    })
}

/// Worst result of one block across its configurations.
#[derive(Clone, Debug)]
pub struct BlockReport {
    pub block: String,
    pub configs: usize,
    pub elements: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
}

/// Checks `block` on `configs` random configurations drawn from `seed`.
pub fn check_block(block: &str, configs: usize, seed: u64, opts: &GradCheckOptions) -> Result<BlockReport> {
    let mut out = BlockReport {
        block: block.to_string(),
        configs,
        elements: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
    };
    for k in 0..configs as u64 {
        let r: GradCheckReport = grad_check_resampled(|s| make_case(block, s), seed.wrapping_mul(1000).wrapping_add(k * 101), opts)?;
        out.elements += r.elements;
        if r.max_rel_error >= out.max_rel_error {
            out.max_rel_error = r.max_rel_error;
            out.worst_param = r.worst_param;
        }
    }
    Ok(out)
}
