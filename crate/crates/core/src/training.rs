//! Cross-entropy and self-critical training, Adam, learning-rate schedules,
//! checkpoints and training logs.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::GridFeatureSet;
use crate::data::{encode, epoch_order, CaptionDataset, Split, Vocabulary, EOS, PAD};
use crate::decoder::{beam_search, greedy_decode, sample_decode, scheduled_sampling_forward, Decoder, Hypothesis};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::metrics::{build_idf, cider_d_single, score_corpus, CorpusIdf, ScoreReport, CIDER_SCALE, CIDER_SIGMA};
use crate::model::{Captioner, ModelSpec};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Mean of `−log softmax(logits)[target]` over non-PAD targets.
pub fn xe_loss<T: Scalar>(g: &mut Graph<T>, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
    let rows = g.value(logits).rows();
    if rows != targets.len() {
        return Err(Error::Data(format!(
            "{} targets for {rows} logit rows",
            targets.len()
        )));
    }
    let count = targets.iter().filter(|&&t| t != PAD).count();
    if count == 0 {
        return Err(Error::Data("every target position is padding".into()));
    }
    let w = T::of(-1.0 / count as f64);
    let picks = targets
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != PAD)
        .map(|(r, &t)| (r, t, w))
        .collect();
    let lsm = g.log_softmax(logits);
    g.pick_sum(lsm, picks)
}

/// Whose reward serves as the SCST baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Mean reward of the drawn samples.
    #[default]
    Mean,
    /// Reward of the greedy caption.
    Greedy,
}

/// `(b, r_i − b)`; `greedy_reward` overrides the sample mean.
pub fn scst_advantages(rewards: &[f64], greedy_reward: Option<f64>) -> Result<(f64, Vec<f64>)> {
    if rewards.is_empty() {
        return Err(Error::Data("no rewards".into()));
    }
    let b = greedy_reward.unwrap_or_else(|| rewards.iter().sum::<f64>() / rewards.len() as f64);
    Ok((b, rewards.iter().map(|r| r - b).collect()))
}

/// `−(1/n) Σ_i a_i · log p(y_i)` for frozen samples `y_i` (each starting with
/// BOS) and advantages `a_i`. Samples with zero advantage are skipped.
pub fn scst_surrogate<T: Scalar>(
    g: &mut Graph<T>,
    decoder: &Decoder,
    memory: NodeId,
    samples: &[Vec<usize>],
    advantages: &[f64],
) -> Result<Option<NodeId>> {
    if samples.len() != advantages.len() {
        return Err(Error::Data(format!(
            "{} samples but {} advantages",
            samples.len(),
            advantages.len()
        )));
    }
    let n = samples.len() as f64;
    let mut total: Option<NodeId> = None;
    for (seq, &a) in samples.iter().zip(advantages) {
        if a == 0.0 || seq.len() < 2 {
            continue;
        }
        let logits = decoder.forward(g, &seq[..seq.len() - 1], memory)?;
        let lsm = g.log_softmax(logits);
        let w = T::of(-a / n);
        let picks = seq[1..].iter().enumerate().map(|(t, &tok)| (t, tok, w)).collect();
        let term = g.pick_sum(lsm, picks)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(total)
}

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient in parameter {}", p.name)));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let value = p.value.data_mut();
            for (k, (mk, vk)) in m.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
                let gk = g[k].as_f64();
                let m1 = self.beta1 * mk.as_f64() + (1.0 - self.beta1) * gk;
                let v1 = self.beta2 * vk.as_f64() + (1.0 - self.beta2) * gk * gk;
                *mk = T::of(m1);
                *vk = T::of(v1);
                let update = lr * (m1 / c1) / ((v1 / c2).sqrt() + self.eps);
                value[k] = T::of(value[k].as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Rescales accumulated gradients to at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = *g * s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XeConfig {
    pub epochs: usize,
    /// Stop after this many optimizer steps in total, even mid-epoch.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub decay_factor: f64,
    /// First epoch (1-based) that is decayed.
    pub decay_start_epoch: usize,
    pub ss_increment: f64,
    pub ss_every: usize,
    pub ss_max: f64,
    pub clip_norm: Option<f64>,
    /// Evaluate every this many epochs; 0 disables evaluation.
    pub eval_every: usize,
}

impl Default for XeConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            max_steps: None,
            batch_size: 4,
            base_lr: 4e-4,
            warmup_steps: 100,
            decay_factor: 0.1,
            decay_start_epoch: 9,
            ss_increment: 0.05,
            ss_every: 3,
            ss_max: 0.25,
            clip_norm: Some(5.0),
            eval_every: 0,
        }
    }
}

impl XeConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.batch_size, self.base_lr, self.decay_factor, self.clip_norm)?;
        if !(0.0..=1.0).contains(&self.ss_max) || self.ss_increment < 0.0 {
            return Err(Error::Config("scheduled sampling rates must lie in [0, 1]".into()));
        }
        if self.ss_every == 0 {
            return Err(Error::Config("ss_every must be at least 1".into()));
        }
        Ok(())
    }

    /// `base · min(1, step / warmup) · decay^max(0, epoch − start + 1)`.
    pub fn lr_at(&self, step: u64, epoch: usize) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / self.warmup_steps as f64).min(1.0)
        };
        let decays = (epoch + 1).saturating_sub(self.decay_start_epoch);
        self.base_lr * warm * self.decay_factor.powi(decays as i32)
    }

    /// Scheduled-sampling probability for a 1-based epoch.
    pub fn ss_probability(&self, epoch: usize) -> f64 {
        (self.ss_increment * (epoch / self.ss_every) as f64).min(self.ss_max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScstConfig {
    pub epochs: usize,
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    /// Captions sampled per image.
    pub samples: usize,
    pub baseline: BaselineKind,
    pub clip_norm: Option<f64>,
    pub eval_every: usize,
}

impl Default for ScstConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            max_steps: None,
            batch_size: 4,
            base_lr: 4e-5,
            decay_factor: 0.1,
            decay_every: 3,
            samples: 5,
            baseline: BaselineKind::Mean,
            clip_norm: Some(5.0),
            eval_every: 0,
        }
    }
}

impl ScstConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.batch_size, self.base_lr, self.decay_factor, self.clip_norm)?;
        if self.samples < 2 {
            return Err(Error::Config("SCST needs at least 2 samples per image".into()));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be at least 1".into()));
        }
        Ok(())
    }

    /// `base · decay^floor(epoch / decay_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

fn check_common(batch: usize, lr: f64, decay: f64, clip: Option<f64>) -> Result<()> {
    if batch == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("base_lr must be positive, got {lr}")));
    }
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::Config(format!("decay_factor must lie in (0, 1], got {decay}")));
    }
    if let Some(c) = clip {
        if !(c > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Xe,
    Scst,
}

/// Independent random stream for one (stage, purpose, counter) triple.
pub fn stream_rng(seed: u64, stage: Stage, purpose: u8, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = (stage as u64) << 60 | (purpose as u64) << 52;
    rng.set_stream(tag | counter);
    rng
}

const SHUFFLE: u8 = 1;
const STEP: u8 = 2;

/// One training image: features, encoded targets and raw references.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    pub features: Arc<GridFeatureSet>,
    /// BOS … EOS, unpadded.
    pub targets: Vec<Vec<usize>>,
    pub references: Vec<Vec<String>>,
}

pub fn prepare_items(
    dataset: &CaptionDataset,
    split: Split,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<TrainItem>> {
    let items: Vec<TrainItem> = dataset
        .split(split)
        .map(|it| {
            if it.captions.is_empty() {
                return Err(Error::Data(format!("image {} has no captions", it.id)));
            }
            let targets = it
                .captions
                .iter()
                .map(|c| {
                    let seq = encode(c, vocab, max_len).0;
                    let end = seq.iter().position(|&t| t == EOS).expect("encode appends EOS");
                    seq[..=end].to_vec()
                })
                .collect();
            Ok(TrainItem {
                id: it.id.clone(),
                features: it.features.load()?,
                targets,
                references: it.captions.clone(),
            })
        })
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Data(format!("split {split} is empty")));
    }
    Ok(items)
}

/// Parameters, optimizer state and position in the schedule.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub stage: Stage,
    pub step: u64,
    /// Current 1-based epoch.
    pub epoch: usize,
    /// Batches already done in the current epoch.
    pub batch: usize,
}

impl TrainState {
    pub fn new(store: ParamStore<f32>, stage: Stage) -> Self {
        Self {
            adam: Adam::new(&store),
            store,
            stage,
            step: 0,
            epoch: 1,
            batch: 0,
        }
    }

    /// Switches to a new stage with a fresh optimizer.
    pub fn restart(self, stage: Stage) -> Self {
        Self::new(self.store, stage)
    }
}

/// Training log written as CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl TrainLog {
    pub fn xe() -> Self {
        Self::with_columns(&["epoch", "step", "lr", "loss", "loss_sum", "ss_prob", "cider_d"])
    }

    pub fn scst() -> Self {
        Self::with_columns(&["epoch", "step", "lr", "loss", "reward_mean", "baseline", "cider_d"])
    }

    fn with_columns(cols: &[&str]) -> Self {
        Self {
            header: cols.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Values of one column parsed as numbers; blank cells are skipped.
    pub fn column(&self, name: &str) -> Vec<f64> {
        let Some(i) = self.header.iter().position(|h| h == name) else {
            return Vec::new();
        };
        self.rows.iter().filter_map(|r| r[i].parse().ok()).collect()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Items used for periodic evaluation during training.
#[derive(Clone, Copy, Debug)]
pub struct EvalSet<'a> {
    pub items: &'a [TrainItem],
    pub vocab: &'a Vocabulary,
    pub beam: usize,
}

/// Best hypothesis for one image: greedy for `beam <= 1`, else beam search.
pub fn decode_best(
    model: &Captioner,
    store: &ParamStore<f32>,
    features: &GridFeatureSet,
    beam: usize,
) -> Result<Hypothesis> {
    let memory = model.memory(store, features)?;
    let step = model.stepper(store, memory);
    if beam <= 1 {
        return greedy_decode(&step, model.max_len());
    }
    beam_search(&step, beam, model.max_len())?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Numerical("beam search produced no hypothesis".into()))
}

/// Decodes one image's caption as words.
pub fn caption_words(
    model: &Captioner,
    store: &ParamStore<f32>,
    features: &GridFeatureSet,
    vocab: &Vocabulary,
    beam: usize,
) -> Result<Vec<String>> {
    Ok(vocab.decode(&decode_best(model, store, features, beam)?.tokens))
}

/// Scores the model's captions on `set`; returns the report and the captions.
pub fn evaluate_items(
    model: &Captioner,
    store: &ParamStore<f32>,
    set: EvalSet<'_>,
) -> Result<(ScoreReport, Vec<Vec<String>>)> {
    let caps = set
        .items
        .iter()
        .map(|it| caption_words(model, store, &it.features, set.vocab, set.beam))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<Vec<Vec<String>>> = set.items.iter().map(|it| it.references.clone()).collect();
    Ok((score_corpus(&caps, &refs)?, caps))
}

fn finish_step(state: &mut TrainState, grads: &crate::params::Gradients<f32>, clip: Option<f64>, lr: f64) -> Result<()> {
    state.store.zero_grad();
    state.store.accumulate(grads);
    if let Some(c) = clip {
        clip_grad_norm(&mut state.store, c);
    }
    state.adam.step(&mut state.store, lr)
}

fn batches(n: usize, size: usize) -> usize {
    n.div_ceil(size)
}

/// Cross-entropy training with scheduled sampling. Resumes from the position
/// recorded in `state`; appends one row per epoch to `log`.
pub fn train_xe(
    model: &Captioner,
    state: &mut TrainState,
    items: &[TrainItem],
    cfg: &XeConfig,
    seed: u64,
    eval: Option<EvalSet<'_>>,
    log: &mut TrainLog,
) -> Result<()> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Data("no training items".into()));
    }
    let per_epoch = batches(items.len(), cfg.batch_size);
    while state.epoch <= cfg.epochs {
        let epoch = state.epoch;
        let order = epoch_order(items.len(), &mut stream_rng(seed, Stage::Xe, SHUFFLE, epoch as u64));
        let p = cfg.ss_probability(epoch);
        let (mut loss_acc, mut sum_acc, mut steps) = (0.0, 0.0, 0usize);
        let mut lr = cfg.lr_at(state.step, epoch);
        let mut stopped = false;
        while state.batch < per_epoch {
            if cfg.max_steps.is_some_and(|m| state.step >= m) {
                stopped = true;
                break;
            }
            state.step += 1;
            lr = cfg.lr_at(state.step, epoch);
            let mut rng = stream_rng(seed, Stage::Xe, STEP, state.step);
            let idx = &order[state.batch * cfg.batch_size..((state.batch + 1) * cfg.batch_size).min(items.len())];
            let (loss, loss_sum, grads) = {
                let mut g = Graph::new(&state.store);
                let mut total: Option<NodeId> = None;
                let mut count = 0usize;
                let mut token_sum = 0.0;
                for &i in idx {
                    let item = &items[i];
                    let (memory, _) = model.encode(&mut g, &item.features)?;
                    for seq in &item.targets {
                        let (logits, _) =
                            scheduled_sampling_forward(&model.decoder, &mut g, &seq[..seq.len() - 1], memory, p, &mut rng)?;
                        let l = xe_loss(&mut g, logits, &seq[1..])?;
                        token_sum += g.value(l).data()[0].as_f64() * (seq.len() - 1) as f64;
                        total = Some(match total {
                            Some(acc) => g.add(acc, l)?,
                            None => l,
                        });
                        count += 1;
                    }
                }
                let total = total.expect("every item has a caption");
                let loss = g.scale(total, 1.0 / count as f32);
                let grads = g.backward(loss)?;
                (g.value(loss).data()[0] as f64, token_sum / count as f64, grads)
            };
            finish_step(state, &grads, cfg.clip_norm, lr)?;
            state.batch += 1;
            loss_acc += loss;
            sum_acc += loss_sum;
            steps += 1;
        }
        if steps > 0 {
            let due = stopped || state.epoch == cfg.epochs || (cfg.eval_every > 0 && epoch.is_multiple_of(cfg.eval_every));
            let cider = match eval {
                Some(set) if cfg.eval_every > 0 && due => Some(evaluate_items(model, &state.store, set)?.0.cider_d),
                _ => None,
            };
            log.rows.push(vec![
                epoch.to_string(),
                state.step.to_string(),
                format!("{lr:.6e}"),
                format!("{:.6}", loss_acc / steps as f64),
                format!("{:.6}", sum_acc / steps as f64),
                format!("{p:.2}"),
                fmt_opt(cider),
            ]);
            log::info!(
                "xe epoch {epoch} step {} loss {:.4} ss {p:.2}",
                state.step,
                loss_acc / steps as f64
            );
        }
        if stopped {
            return Ok(());
        }
        state.epoch += 1;
        state.batch = 0;
    }
    Ok(())
}

/// Reward statistics of one SCST step.
#[derive(Clone, Debug, PartialEq)]
pub struct ScstStats {
    pub reward_mean: f64,
    pub baseline_mean: f64,
    /// Largest per-image `|Σ_i (r_i − b)|`.
    pub max_advantage_sum: f64,
}

/// Self-critical fine-tuning with CIDEr-D rewards; one log row per step.
pub fn train_scst(
    model: &Captioner,
    state: &mut TrainState,
    items: &[TrainItem],
    vocab: &Vocabulary,
    cfg: &ScstConfig,
    seed: u64,
    eval: Option<EvalSet<'_>>,
    log: &mut TrainLog,
) -> Result<Vec<ScstStats>> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Data("no training items".into()));
    }
    let refs: Vec<Vec<Vec<String>>> = items.iter().map(|it| it.references.clone()).collect();
    let idf = build_idf(&refs)?;
    let per_epoch = batches(items.len(), cfg.batch_size);
    let mut all_stats = Vec::new();
    while state.epoch <= cfg.epochs {
        let epoch = state.epoch;
        let order = epoch_order(items.len(), &mut stream_rng(seed, Stage::Scst, SHUFFLE, epoch as u64));
        let lr = cfg.lr_at(epoch);
        while state.batch < per_epoch {
            if cfg.max_steps.is_some_and(|m| state.step >= m) {
                return Ok(all_stats);
            }
            state.step += 1;
            let mut rng = stream_rng(seed, Stage::Scst, STEP, state.step);
            let idx = &order[state.batch * cfg.batch_size..((state.batch + 1) * cfg.batch_size).min(items.len())];
            let (loss, stats, grads) = {
                let mut g = Graph::new(&state.store);
                let mut total: Option<NodeId> = None;
                let (mut r_sum, mut b_sum, mut worst) = (0.0, 0.0, 0.0f64);
                for &i in idx {
                    let item = &items[i];
                    let (memory, _) = model.encode(&mut g, &item.features)?;
                    let out = scst_image(model, &mut g, memory, item, vocab, &idf, cfg, &mut rng)?;
                    r_sum += out.reward_mean;
                    b_sum += out.baseline;
                    worst = worst.max(out.advantage_sum.abs());
                    if let Some(t) = out.loss {
                        total = Some(match total {
                            Some(acc) => g.add(acc, t)?,
                            None => t,
                        });
                    }
                }
                let n = idx.len() as f64;
                let stats = ScstStats {
                    reward_mean: r_sum / n,
                    baseline_mean: b_sum / n,
                    max_advantage_sum: worst,
                };
                match total {
                    Some(t) => {
                        let loss = g.scale(t, 1.0 / n as f32);
                        let grads = g.backward(loss)?;
                        (g.value(loss).data()[0] as f64, stats, Some(grads))
                    }
                    None => (0.0, stats, None),
                }
            };
            if let Some(grads) = grads {
                finish_step(state, &grads, cfg.clip_norm, lr)?;
            } else {
                state.adam.t += 1;
            }
            state.batch += 1;
            let last = state.batch == per_epoch && epoch == cfg.epochs;
            let at_end = last || cfg.max_steps == Some(state.step);
            let due = at_end || (cfg.eval_every > 0 && state.batch == per_epoch && epoch.is_multiple_of(cfg.eval_every));
            let cider = match eval {
                Some(set) if cfg.eval_every > 0 && due => Some(evaluate_items(model, &state.store, set)?.0.cider_d),
                _ => None,
            };
            log.rows.push(vec![
                epoch.to_string(),
                state.step.to_string(),
                format!("{lr:.6e}"),
                format!("{loss:.6}"),
                format!("{:.6}", stats.reward_mean),
                format!("{:.6}", stats.baseline_mean),
                fmt_opt(cider),
            ]);
            log::debug!(
                "scst step {} reward {:.4} baseline {:.4}",
                state.step,
                stats.reward_mean,
                stats.baseline_mean
            );
            all_stats.push(stats);
        }
        state.epoch += 1;
        state.batch = 0;
    }
    Ok(all_stats)
}

struct ImageOutcome {
    loss: Option<NodeId>,
    reward_mean: f64,
    baseline: f64,
    advantage_sum: f64,
}

#[allow(clippy::too_many_arguments)]
fn scst_image(
    model: &Captioner,
    g: &mut Graph<f32>,
    memory: NodeId,
    item: &TrainItem,
    vocab: &Vocabulary,
    idf: &CorpusIdf,
    cfg: &ScstConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ImageOutcome> {
    if item.references.is_empty() {
        return Err(Error::Data(format!("image {} has no references", item.id)));
    }
    let step = model.stepper(g.store(), g.value(memory).clone());
    let reward = |tokens: &crate::data::TokenSequence| {
        cider_d_single(&vocab.decode(tokens), &item.references, idf, CIDER_SIGMA, CIDER_SCALE)
    };
    let mut samples = Vec::with_capacity(cfg.samples);
    let mut rewards = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let s = sample_decode(&step, model.max_len(), rng, false)?;
        rewards.push(reward(&s.tokens));
        samples.push(s.tokens.0);
    }
    let greedy = match cfg.baseline {
        BaselineKind::Mean => None,
        BaselineKind::Greedy => Some(reward(&greedy_decode(&step, model.max_len())?.tokens)),
    };
    let (b, adv) = scst_advantages(&rewards, greedy)?;
    let loss = scst_surrogate(g, &model.decoder, memory, &samples, &adv)?;
    Ok(ImageOutcome {
        loss,
        reward_mean: rewards.iter().sum::<f64>() / rewards.len() as f64,
        baseline: b,
        advantage_sum: adv.iter().sum(),
    })
}

const CKPT_MAGIC: &[u8; 4] = b"OSCK";
const CKPT_VERSION: u32 = 1;

/// Hex SHA-256 of the canonical JSON of a model spec.
pub fn config_hash(spec: &ModelSpec) -> String {
    let json = serde_json::to_vec(&spec.config).expect("model config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub vocab: Vec<String>,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        config_hash(&self.spec)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        put_u32(&mut out, CKPT_VERSION);
        put_bytes(&mut out, self.config_hash().as_bytes());
        put_bytes(&mut out, &serde_json::to_vec(&self.spec).expect("spec serializes"));
        put_bytes(&mut out, &serde_json::to_vec(&self.vocab).expect("vocab serializes"));
        let s = &self.state;
        out.push(match s.stage {
            Stage::Xe => 0,
            Stage::Scst => 1,
        });
        put_u64(&mut out, s.step);
        put_u64(&mut out, s.epoch as u64);
        put_u64(&mut out, s.batch as u64);
        put_u32(&mut out, s.store.len() as u32);
        for p in s.store.iter() {
            put_bytes(&mut out, p.name.as_bytes());
            put_tensor(&mut out, &p.value);
        }
        put_u64(&mut out, s.adam.t);
        for (m, v) in s.adam.m.iter().zip(&s.adam.v) {
            put_tensor(&mut out, m);
            put_tensor(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hash = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| Error::Format("bad hash".into()))?;
        let spec: ModelSpec = serde_json::from_slice(r.bytes()?)
            .map_err(|e| Error::Format(format!("checkpoint model spec: {e}")))?;
        if config_hash(&spec) != hash {
            return Err(Error::Format("checkpoint header hash does not match its config".into()));
        }
        let vocab: Vec<String> = serde_json::from_slice(r.bytes()?)
            .map_err(|e| Error::Format(format!("checkpoint vocabulary: {e}")))?;
        let stage = match r.take(1)?[0] {
            0 => Stage::Xe,
            1 => Stage::Scst,
            s => return Err(Error::Format(format!("unknown stage tag {s}"))),
        };
        let step = r.u64()?;
        let epoch = r.u64()? as usize;
        let batch = r.u64()? as usize;
        let mut store = ParamStore::<f32>::new();
        Captioner::new(&mut store, &spec, 0).map_err(|e| Error::Format(format!("checkpoint spec: {e}")))?;
        let count = r.u32()? as usize;
        if count != store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} parameters, model expects {}",
                store.len()
            )));
        }
        for _ in 0..count {
            let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| Error::Format("bad name".into()))?;
            let t = r.tensor()?;
            let id = store
                .id(&name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            if store.value(id).shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = t;
        }
        let mut adam = Adam::new(&store);
        adam.t = r.u64()?;
        for (k, p) in store.iter().enumerate() {
            let m = r.tensor()?;
            let v = r.tensor()?;
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::Format(format!("optimizer moments of {} have the wrong shape", p.name)));
            }
            adam.m[k] = m;
            adam.v[k] = v;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            spec,
            vocab,
            state: TrainState {
                store,
                adam,
                stage,
                step,
                epoch,
                batch,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Rebuilds the model structure; parameters stay in `state.store`.
    pub fn model(&self) -> Result<Captioner> {
        Captioner::new(&mut ParamStore::<f32>::new(), &self.spec, 0)
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_tokens(&self.vocab)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u32()? as usize;
        if rank > 4 {
            return Err(Error::Format(format!("tensor rank {rank} too large")));
        }
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::new(shape, data)
    }
}
