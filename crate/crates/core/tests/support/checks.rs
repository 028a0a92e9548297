//! Randomized comparisons of the library against the reference loops.

use osic_core::backbone::{Aligner, GridFeatureSet};
use osic_core::ddr::{ChannelBlock, DdrLayer, RefineConfig, RefineMode, SpatialBlock};
use osic_core::decoder::{Decoder, DecoderConfig};
use osic_core::dmse::{Dmse, SqueezeMode};
use osic_core::metrics::{bleu, build_idf, cider_d, rouge_l, CIDER_SCALE, CIDER_SIGMA};
use osic_core::data::{encode, synth_dataset, SYNTH_LEVELS};
use osic_core::model::{Captioner, ModelConfig, ModelSpec};
use osic_core::nn::FeedForward;
use osic_core::training::xe_loss;
use osic_core::{Graph, ParamStore, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Worst disagreement of one comparison over all trials.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub trials: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

fn pick(rng: &mut ChaCha8Rng, options: &[usize]) -> usize {
    options[rng.random_range(0..options.len())]
}

fn run(name: &'static str, trials: usize, seed: u64, tolerance: f64, mut trial: impl FnMut(&mut ChaCha8Rng) -> f64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_error = (0..trials).map(|_| trial(&mut rng)).fold(0.0, f64::max);
    Check {
        name,
        trials,
        max_error,
        tolerance,
    }
}

const PARAM_RANGE: f64 = 0.5;

fn forward<T: Scalar>(store: &ParamStore<T>, x: &Tensor<T>, f: impl FnOnce(&mut Graph<T>, osic_core::NodeId) -> osic_core::NodeId) -> Mat {
    let mut g = Graph::new(store);
    let xn = g.constant(x.clone()).unwrap();
    let y = f(&mut g, xn);
    mat(g.value(y))
}

/// Every encoder and loss equation at precision `T` against the f64 scalar
/// loops, as error relative to `max(1, |reference|)`.
pub fn equation_checks<T: Scalar>(trials: usize, seed: u64) -> Vec<Check> {
    let tol = 1e-6;
    let mut out = Vec::new();

    out.push(run("feed-forward", trials, seed, tol, |rng| {
        let (n, d) = (rng.random_range(1..=6), rng.random_range(1..=8));
        let mut store = ParamStore::<T>::new();
        let ff = FeedForward::new(&mut store, "ffn", d, rng.random_range(1..=16), rng).unwrap();
        scramble(&mut store, rng, PARAM_RANGE);
        let x = random_mat(rng, n, d, 1.0);
        let got = forward(&store, &x, |g, x| ff.forward(g, x).unwrap());
        scaled_diff(&got, &ffn(&mat(&x), &store, "ffn"))
    }));

    out.push(run("multi-sight alignment", trials, seed + 1, tol, |rng| {
        let coarse = pick(rng, &[1, 4]);
        let sizes = [coarse * 16, coarse * 4, coarse, coarse];
        let d = rng.random_range(1..=6);
        let levels: Vec<Tensor<f32>> = sizes
            .iter()
            .map(|&p| {
                let c = rng.random_range(1..=5);
                random_mat(rng, p, c, 1.0)
            })
            .collect();
        let shapes: Vec<(usize, usize)> = levels.iter().map(|l| (l.rows(), l.cols())).collect();
        let mut store = ParamStore::<T>::new();
        let al = Aligner::new(&mut store, "align", &shapes, d, rng).unwrap();
        scramble(&mut store, rng, PARAM_RANGE);
        let set = GridFeatureSet::new(levels.clone()).unwrap();
        let mut g = Graph::new(&store);
        let y = al.forward(&mut g, &set).unwrap();
        let want = multi_sight(&levels.iter().map(mat).collect::<Vec<_>>(), &store, "align");
        scaled_diff(&mat(g.value(y)), &want)
    }));

    for (name, mode) in [("squeeze-excite gate", SqueezeMode::Pool), ("learnable squeeze gate", SqueezeMode::Learnable)] {
        out.push(run(name, trials, seed + 2, tol, |rng| {
            let (n, c) = (rng.random_range(1..=6), 4 * rng.random_range(1..=3));
            let mut store = ParamStore::<T>::new();
            let dm = Dmse::new(&mut store, "dmse", c, rng.random_range(1..=c), c / 4, n, mode, rng).unwrap();
            scramble(&mut store, rng, PARAM_RANGE);
            let m = random_mat(rng, n, c, 1.0);
            let got = forward(&store, &m, |g, x| dm.forward(g, x).unwrap().gate);
            let vs = match mode {
                SqueezeMode::Pool => squeeze_pool(&mat(&m)),
                SqueezeMode::Learnable => squeeze_learnable(&mat(&m), &store, "dmse"),
            };
            scaled_diff(&got, &vec![excite(&vs, &store, "dmse")])
        }));
    }

    out.push(run("gated embedding and fuse", trials, seed + 3, tol, |rng| {
        let (n, c) = (rng.random_range(1..=6), 4 * rng.random_range(1..=3));
        let mut store = ParamStore::<T>::new();
        let dm = Dmse::new(&mut store, "dmse", c, c / 4, c / 4, n, SqueezeMode::Pool, rng).unwrap();
        scramble(&mut store, rng, PARAM_RANGE);
        let m = random_mat(rng, n, c, 1.0);
        let mut g = Graph::new(&store);
        let x = g.constant(m.clone()).unwrap();
        let o = dm.forward(&mut g, x).unwrap();
        let gate = mat(g.value(o.gate)).remove(0);
        let embedded = gated_embedding(&mat(&m), &gate, &store, "dmse");
        let fused = linear(&embedded, &store, "dmse.fuse");
        scaled_diff(&mat(g.value(o.embedded)), &embedded).max(scaled_diff(&mat(g.value(o.fused)), &fused))
    }));

    out.push(run("spatial attention", trials, seed + 4, tol, |rng| {
        let heads = pick(rng, &[1, 2]);
        let (n, d) = (rng.random_range(2..=6), heads * rng.random_range(1..=4));
        let mut store = ParamStore::<T>::new();
        let b = SpatialBlock::new(&mut store, "sp", n, d, heads, rng).unwrap();
        scramble(&mut store, rng, PARAM_RANGE);
        let x = random_mat(rng, n, d, 1.0);
        let got = forward(&store, &x, |g, x| b.forward(g, x).unwrap().0);
        scaled_diff(&got, &spatial(&mat(&x), &store, "sp", heads))
    }));

    out.push(run("channel attention", trials, seed + 5, tol, |rng| {
        let heads = pick(rng, &[1, 2]);
        let (n, d) = (heads * rng.random_range(1..=3), rng.random_range(2..=6));
        let mut store = ParamStore::<T>::new();
        let b = ChannelBlock::new(&mut store, "ch", n, d, heads, rng).unwrap();
        scramble(&mut store, rng, PARAM_RANGE);
        let x = random_mat(rng, n, d, 1.0);
        let got = forward(&store, &x, |g, x| b.forward(g, x).unwrap().0);
        scaled_diff(&got, &channel(&mat(&x), &store, "ch", heads))
    }));

    for (name, mode) in [
        ("parallel refining", RefineMode::Parallel),
        ("cascade refining", RefineMode::Cascade),
    ] {
        out.push(run(name, trials, seed + 6, tol, |rng| {
            let heads = pick(rng, &[1, 2]);
            let channel_heads = pick(rng, &[1, 2]);
            let n = 2 * rng.random_range(1..=3);
            let d = heads * rng.random_range(1..=3).max(2 / heads);
            let cfg = RefineConfig {
                mode,
                layers: 1,
                heads,
                channel_heads,
            };
            let mut store = ParamStore::<T>::new();
            let layer = DdrLayer::new(&mut store, "layer", &cfg, n, d, rng.random_range(1..=8), rng).unwrap();
            scramble(&mut store, rng, PARAM_RANGE);
            let x = random_mat(rng, n, d, 1.0);
            let block = forward(&store, &x, |g, x| layer.refine(g, x).unwrap().0);
            let full = forward(&store, &x, |g, x| layer.forward(g, x).unwrap().0);
            let xm = mat(&x);
            let want = match mode {
                RefineMode::Parallel => parallel(&xm, &store, "layer", heads, channel_heads),
                _ => cascade(&xm, &store, "layer", heads, channel_heads),
            };
            let want_full = refine_layer(&xm, &store, "layer", mode.as_str(), heads, channel_heads);
            scaled_diff(&block, &want).max(scaled_diff(&full, &want_full))
        }));
    }

    out.push(run("cross-entropy", trials, seed + 7, tol, |rng| {
        let (t, v) = (rng.random_range(1..=6), rng.random_range(4..=10));
        let logits = random_mat(rng, t, v, 3.0);
        let mut targets: Vec<usize> = (0..t).map(|_| rng.random_range(0..v)).collect();
        targets[0] = rng.random_range(1..v);
        let store = ParamStore::<T>::new();
        let mut g = Graph::new(&store);
        let l = g.constant(logits.clone()).unwrap();
        let loss = xe_loss(&mut g, l, &targets).unwrap();
        let want = cross_entropy(&mat(&logits), &targets);
        (g.value(loss).data()[0].as_f64() - want).abs() / want.abs().max(1.0)
    }));

    out
}

/// Full-model logits in f32 against the same weights in f64, relative to the
/// largest logit.
pub fn precision_check(trials: usize, seed: u64) -> Check {
    let data = synth_dataset(seed, 4, 8).unwrap();
    let modes = [RefineMode::None, RefineMode::Spatial, RefineMode::Channel, RefineMode::Parallel, RefineMode::Cascade];
    run("32-bit forward pass", trials, seed, 1e-3, |rng| {
        let spec = ModelSpec {
            config: ModelConfig {
                d_model: 16,
                d_ff: 32,
                use_dmse: rng.random_bool(0.5),
                refine: RefineConfig {
                    mode: modes[rng.random_range(0..modes.len())],
                    layers: rng.random_range(1..=2),
                    heads: 2,
                    channel_heads: 1,
                },
                ..Default::default()
            },
            levels: SYNTH_LEVELS.to_vec(),
            vocab_size: data.vocab.len(),
        };
        let mut wide = ParamStore::<f64>::new();
        let model = Captioner::new(&mut wide, &spec, rng.random()).unwrap();
        let narrow = wide.cast::<f32>();
        let item = &data.dataset.items[rng.random_range(0..data.dataset.items.len())];
        let feats = item.features.load().unwrap();
        let tokens = encode(&item.captions[0], &data.vocab, 12);
        let tokens = &tokens.ids()[..tokens.ids().len() - 1];
        let mut g = Graph::new(&wide);
        let y = model.forward(&mut g, &feats, tokens).unwrap();
        let want = mat(g.value(y));
        let mut g = Graph::new(&narrow);
        let y = model.forward(&mut g, &feats, tokens).unwrap();
        let scale = want.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
        max_diff(&mat(g.value(y)), &want) / scale
    })
}

/// Decoder logits for short random prefixes.
pub fn decoder_check(trials: usize, seed: u64) -> Check {
    run("decoder logits", trials, seed, 1e-5, |rng| {
        let heads = pick(rng, &[1, 2]);
        let cfg = DecoderConfig {
            layers: rng.random_range(1..=2),
            heads,
            d_model: heads * rng.random_range(2..=4),
            d_ff: rng.random_range(2..=8),
            max_len: 16,
            vocab_size: rng.random_range(5..=9),
        };
        let mut store = ParamStore::<f64>::new();
        let dec = Decoder::new(&mut store, "dec", &cfg, rng).unwrap();
        scramble(&mut store, rng, PARAM_RANGE);
        let mut tokens = vec![1];
        tokens.extend((0..2).map(|_| rng.random_range(0..cfg.vocab_size)));
        let rows = rng.random_range(1..=4);
        let memory = random_mat(rng, rows, cfg.d_model, 1.0);
        let mut g = Graph::new(&store);
        let m = g.constant(memory.clone()).unwrap();
        let y = dec.forward(&mut g, &tokens, m).unwrap();
        let want = decoder_logits(&tokens, &mat(&memory), &store, "dec", cfg.layers, heads);
        max_diff(&mat(g.value(y)), &want)
    })
}

/// BLEU-1..4, ROUGE-L and CIDEr-D on random corpora against brute force.
pub fn metric_checks(trials: usize, seed: u64) -> Vec<Check> {
    let tol = 1e-4;
    let mut b = 0.0f64;
    let mut r = 0.0f64;
    let mut c = 0.0f64;
    for t in 0..trials as u64 {
        let (cands, refs) = random_corpus(seed + t, 20);
        let got = bleu(&cands, &refs).unwrap();
        let want = brute_bleu(&cands, &refs);
        for k in 0..4 {
            b = b.max((got[k] - want[k]).abs());
        }
        for (cand, rs) in cands.iter().zip(&refs) {
            r = r.max((rouge_l(cand, rs) - brute_rouge(cand, rs)).abs());
        }
        let idf = build_idf(&refs).unwrap();
        let (got, _) = cider_d(&cands, &refs, &idf, CIDER_SIGMA, CIDER_SCALE).unwrap();
        c = c.max((got - brute_cider(&cands, &refs)).abs());
    }
    [("BLEU-1..4", b), ("ROUGE-L", r), ("CIDEr-D", c)]
        .into_iter()
        .map(|(name, max_error)| Check {
            name,
            trials,
            max_error,
            tolerance: tol,
        })
        .collect()
}
