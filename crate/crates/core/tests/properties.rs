use osic_core::data::BOS;
use osic_core::ddr::{Ddr, RefineConfig, RefineMode, SpatialBlock};
use osic_core::decoder::{beam_search, greedy_decode, Decoder, DecoderConfig};
use osic_core::nn::{ffn, layer_norm, softmax};
use osic_core::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-5.0f64..5.0, r * c).prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
    })
}

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f32> {
    Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0f32..1.0))
}

fn permute_rows<T: osic_core::Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    Tensor::from_fn(x.rows(), x.cols(), |r, c| x.get(perm[r], c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in matrix(5, 8), axis in 0usize..2) {
        let y = softmax(&x, axis).unwrap();
        let y = if axis == 0 { y.transpose() } else { y };
        for r in 0..y.rows() {
            prop_assert!(y.row(r).iter().all(|&v| v >= 0.0));
            prop_assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ignores_constant_shift(x in matrix(4, 6), shift in -50.0f64..50.0) {
        let a = softmax(&x, 1).unwrap();
        let b = softmax(&x.map(|v| v + shift), 1).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_gives_zero_mean_unit_variance(x in matrix(4, 8)) {
        prop_assume!(x.cols() > 1);
        let c = x.cols();
        let y = layer_norm(&x, 1, &Tensor::full(&[c], 1.0), &Tensor::zeros(&[c]), 1e-12).unwrap();
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            prop_assume!(var > 1e-6);
            let out = y.row(r);
            let m = out.iter().sum::<f64>() / c as f64;
            let v = out.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c as f64;
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ffn_is_position_wise(x in matrix(6, 4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = x.cols();
        let h = rng.random_range(1..8);
        let mut w = |r, c| Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let (w1, b1, w2, b2) = (w(d, h), w(1, h), w(h, d), w(1, d));
        let full = ffn(&x, &w1, &b1, &w2, &b2).unwrap();
        for r in 0..x.rows() {
            let one = ffn(&Tensor::row_vector(x.row(r)), &w1, &b1, &w2, &b2).unwrap();
            prop_assert_eq!(one.row(0), full.row(r));
        }
    }

    #[test]
    fn zero_layer_refining_is_bit_exact_identity(seed in any::<u64>(), mode_idx in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mode = [RefineMode::None, RefineMode::Spatial, RefineMode::Channel, RefineMode::Parallel, RefineMode::Cascade][mode_idx];
        let cfg = RefineConfig { mode, layers: 0, heads: 2, channel_heads: 1 };
        let mut store = ParamStore::<f32>::new();
        let ddr = Ddr::new(&mut store, "ddr", &cfg, 4, 8, 16, &mut rng).unwrap();
        let x = random_tensor(&mut rng, 4, 8);
        let mut g = Graph::new(&store);
        let xn = g.constant(x.clone()).unwrap();
        let (y, traces) = ddr.forward(&mut g, xn).unwrap();
        prop_assert!(traces.is_empty());
        prop_assert_eq!(g.value(y), &x);
    }

    #[test]
    fn spatial_block_is_permutation_equivariant(seed in any::<u64>(), heads in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..8);
        let d = heads * rng.random_range(1..5);
        let mut store = ParamStore::<f32>::new();
        let block = SpatialBlock::new(&mut store, "sp", n, d, heads, &mut rng).unwrap();
        let x = random_tensor(&mut rng, n, d);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let run = |input: &Tensor<f32>| {
            let mut g = Graph::new(&store);
            let xn = g.constant(input.clone()).unwrap();
            let (y, _) = block.forward(&mut g, xn).unwrap();
            g.value(y).clone()
        };
        let want = permute_rows(&run(&x), &perm);
        let got = run(&permute_rows(&x, &perm));
        for (a, b) in got.data().iter().zip(want.data()) {
            prop_assert!((a - b).abs() < 1e-5, "{} vs {}", a, b);
        }
    }

    #[test]
    fn future_tokens_leave_earlier_logits_bit_identical(seed in any::<u64>(), len in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dec, store, memory) = toy_decoder(&mut rng);
        let mut tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..dec.config.vocab_size)).collect();
        tokens[0] = BOS;
        let mut altered = tokens.clone();
        let cut = rng.random_range(1..len);
        for t in altered.iter_mut().skip(cut) {
            *t = rng.random_range(0..dec.config.vocab_size);
        }
        let logits = |toks: &[usize]| {
            let mut g = Graph::new(&store);
            let m = g.constant(memory.clone()).unwrap();
            let y = dec.forward(&mut g, toks, m).unwrap();
            g.value(y).clone()
        };
        let (a, b) = (logits(&tokens), logits(&altered));
        for r in 0..cut {
            prop_assert_eq!(a.row(r), b.row(r));
        }
        let prefix = logits(&tokens[..cut]);
        for r in 0..cut {
            prop_assert_eq!(prefix.row(r), a.row(r));
        }
    }
}

fn toy_decoder(rng: &mut ChaCha8Rng) -> (Decoder, ParamStore<f32>, Tensor<f32>) {
    let heads = rng.random_range(1..3);
    let cfg = DecoderConfig {
        layers: rng.random_range(1..3),
        heads,
        d_model: heads * rng.random_range(2..5),
        d_ff: rng.random_range(4..12),
        max_len: 8,
        vocab_size: rng.random_range(6..12),
    };
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, "dec", &cfg, rng).unwrap();
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v *= 3.0;
        }
    }
    let rows = rng.random_range(1..5);
    let memory = random_tensor(rng, rows, cfg.d_model);
    (dec, store, memory)
}

#[test]
fn beam_of_one_is_greedy_on_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let (dec, store, memory) = toy_decoder(&mut rng);
        let step = dec.stepper(&store, memory);
        let greedy = greedy_decode(&step, dec.config.max_len).unwrap();
        let beam = beam_search(&step, 1, dec.config.max_len).unwrap();
        assert_eq!(beam[0].tokens, greedy.tokens);
        assert_eq!(beam[0].log_prob.to_bits(), greedy.log_prob.to_bits());
    }
}
