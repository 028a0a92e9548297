//! Transformer caption decoder and the decoding strategies built on it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{TokenSequence, BOS, EOS};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{causal_mask, FeedForward, LayerNorm, Linear, MultiHeadAttention, NormAxis};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Maximum number of generated tokens.
    pub max_len: usize,
    pub vocab_size: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "decoder heads {} must divide d_model {}",
                self.heads, self.d_model
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max caption length must be at least 1".into()));
        }
        if self.vocab_size <= EOS {
            return Err(Error::Config("vocabulary must contain the reserved tokens".into()));
        }
        Ok(())
    }
}

/// Sinusoidal position encodings `[t, d]`.
pub fn positional_encoding<T: Scalar>(t: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(t, d, |pos, i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attention: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub cross_attention: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl DecoderLayer {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &DecoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            self_attention: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, cfg.heads, rng)?,
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d, NormAxis::Channels)?,
            cross_attention: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, cfg.heads, rng)?,
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d, NormAxis::Channels)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.d_ff, rng)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d, NormAxis::Channels)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        memory: NodeId,
        mask: &[bool],
    ) -> Result<NodeId> {
        let (a, _) = self.self_attention.forward(g, x, x, Some(mask))?;
        let x = g.add(x, a)?;
        let x = self.self_norm.forward(g, x)?;
        let (c, _) = self.cross_attention.forward(g, x, memory, None)?;
        let x = g.add(x, c)?;
        let x = self.cross_norm.forward(g, x)?;
        let f = self.ffn.forward(g, x)?;
        let x = g.add(x, f)?;
        self.ffn_norm.forward(g, x)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub embedding: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub output: Linear,
}

impl Decoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &DecoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let embedding = store.add_xavier(format!("{name}.embedding"), cfg.vocab_size, cfg.d_model, rng)?;
        let layers = (0..cfg.layers)
            .map(|i| DecoderLayer::new(store, &format!("{name}.layer{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        let output = Linear::new(store, &format!("{name}.output"), cfg.d_model, cfg.vocab_size, rng)?;
        Ok(Self {
            config: cfg.clone(),
            embedding,
            layers,
            output,
        })
    }

    /// Next-token logits `[t, vocab]` for every input position.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, tokens: &[usize], memory: NodeId) -> Result<NodeId> {
        if tokens.is_empty() {
            return Err(Error::Data("decoder input is empty".into()));
        }
        if tokens[0] != BOS {
            return Err(Error::Data("decoder input must start with BOS".into()));
        }
        TokenSequence(tokens.to_vec()).validate(self.config.vocab_size)?;
        let t = tokens.len();
        let emb = g.param(self.embedding);
        let x = g.gather_rows(emb, tokens)?;
        let pe = g.constant(positional_encoding(t, self.config.d_model))?;
        let mut x = g.add(x, pe)?;
        let mask = causal_mask(t);
        for layer in &self.layers {
            x = layer.forward(g, x, memory, &mask)?;
        }
        self.output.forward(g, x)
    }

    /// Bound to fixed parameters and an encoded image for step-wise decoding.
    pub fn stepper<'a, T: Scalar>(&'a self, store: &'a ParamStore<T>, memory: Tensor<T>) -> DecoderStep<'a, T> {
        DecoderStep {
            decoder: self,
            store,
            memory,
        }
    }
}

/// Anything that scores the next token given a prefix starting with BOS.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

pub struct DecoderStep<'a, T: Scalar> {
    decoder: &'a Decoder,
    store: &'a ParamStore<T>,
    memory: Tensor<T>,
}

impl<T: Scalar> StepModel for DecoderStep<'_, T> {
    fn vocab_size(&self) -> usize {
        self.decoder.config.vocab_size
    }

    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new(self.store);
        let mem = g.constant(self.memory.clone())?;
        let logits = self.decoder.forward(&mut g, prefix, mem)?;
        let last = g.value(logits).rows() - 1;
        let row = g.value(logits).row(last);
        Ok(log_softmax(row))
    }
}

fn log_softmax<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v.as_f64() - lse).collect()
}

/// A decoded caption with its summed and length-normalized log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: TokenSequence,
    pub log_prob: f64,
    pub score: f64,
}

impl Hypothesis {
    fn new(tokens: Vec<usize>, log_prob: f64) -> Self {
        let generated = (tokens.len() - 1).max(1);
        Self {
            score: log_prob / generated as f64,
            tokens: TokenSequence(tokens),
            log_prob,
        }
    }
}

fn argmax(lp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    best
}

/// Argmax token per step from BOS until EOS or `max_len` tokens; ties go to
/// the lowest id.
pub fn greedy_decode(model: &impl StepModel, max_len: usize) -> Result<Hypothesis> {
    let mut tokens = vec![BOS];
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let lp = model.next_log_probs(&tokens)?;
        let next = argmax(&lp);
        log_prob += lp[next];
        tokens.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(Hypothesis::new(tokens, log_prob))
}

/// Length-normalized beam search. Each step keeps the `beam` best expansions
/// of the live hypotheses; expansions ending in EOS retire. Returns the
/// retired pool sorted by normalized score, ties by token order.
pub fn beam_search(model: &impl StepModel, beam: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
    let mut done: Vec<Hypothesis> = Vec::new();
    for step in 0..max_len {
        let mut cands: Vec<(Vec<usize>, f64)> = Vec::with_capacity(live.len() * model.vocab_size());
        for (prefix, lp) in &live {
            let next = model.next_log_probs(prefix)?;
            for (tok, &l) in next.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut seq = prefix.clone();
                seq.push(tok);
                cands.push((seq, lp + l));
            }
        }
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        cands.truncate(beam);
        let last = step + 1 == max_len;
        live.clear();
        for (seq, lp) in cands {
            if *seq.last().expect("non-empty") == EOS || last {
                done.push(Hypothesis::new(seq, lp));
            } else {
                live.push((seq, lp));
            }
        }
        if live.is_empty() {
            break;
        }
    }
    done.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
    done.dedup_by(|a, b| a.tokens == b.tokens);
    Ok(done)
}

/// A sampled caption and the log-probability of each generated token.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tokens: TokenSequence,
    pub step_log_probs: Vec<f64>,
}

impl Sample {
    pub fn log_prob(&self) -> f64 {
        self.step_log_probs.iter().sum()
    }
}

/// Draws an index from a log-probability vector.
pub fn sample_index(lp: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &l) in lp.iter().enumerate() {
        let p = l.exp();
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Multinomial sampling from the model; `argmax` replaces sampling by the
/// greedy choice (the zero-temperature limit).
pub fn sample_decode(
    model: &impl StepModel,
    max_len: usize,
    rng: &mut impl Rng,
    argmax_only: bool,
) -> Result<Sample> {
    let mut tokens = vec![BOS];
    let mut step_log_probs = Vec::new();
    for _ in 0..max_len {
        let lp = model.next_log_probs(&tokens)?;
        let next = if argmax_only { argmax(&lp) } else { sample_index(&lp, rng) };
        step_log_probs.push(lp[next]);
        tokens.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(Sample {
        tokens: TokenSequence(tokens),
        step_log_probs,
    })
}

/// Decoder input after scheduled sampling.
#[derive(Clone, Debug)]
pub struct MixedInput {
    pub tokens: Vec<usize>,
    /// `substituted[t]` is true when input position `t` came from the model.
    pub substituted: Vec<bool>,
}

/// Replaces each input token after BOS, with probability `p`, by a token
/// sampled from the model's teacher-forced prediction for that position.
pub fn scheduled_sampling_input<T: Scalar>(
    decoder: &Decoder,
    store: &ParamStore<T>,
    tokens: &[usize],
    memory: &Tensor<T>,
    p: f64,
    rng: &mut impl Rng,
) -> Result<MixedInput> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("sampling probability {p} outside [0, 1]")));
    }
    let mut mixed = MixedInput {
        tokens: tokens.to_vec(),
        substituted: vec![false; tokens.len()],
    };
    if p == 0.0 || tokens.len() < 2 {
        return Ok(mixed);
    }
    let mut g = Graph::new(store);
    let mem = g.constant(memory.clone())?;
    let logits = decoder.forward(&mut g, tokens, mem)?;
    let logits = g.value(logits);
    for t in 1..tokens.len() {
        if rng.random::<f64>() < p {
            let lp = log_softmax(logits.row(t - 1));
            mixed.tokens[t] = sample_index(&lp, rng);
            mixed.substituted[t] = true;
        }
    }
    Ok(mixed)
}

/// Scheduled-sampling forward pass: mixes the input as above, then runs the
/// decoder on it inside `g`.
pub fn scheduled_sampling_forward<T: Scalar>(
    decoder: &Decoder,
    g: &mut Graph<T>,
    tokens: &[usize],
    memory: NodeId,
    p: f64,
    rng: &mut impl Rng,
) -> Result<(NodeId, MixedInput)> {
    let mem_value = g.value(memory).clone();
    let mixed = scheduled_sampling_input(decoder, g.store(), tokens, &mem_value, p, rng)?;
    let logits = decoder.forward(g, &mixed.tokens, memory)?;
    Ok((logits, mixed))
}
