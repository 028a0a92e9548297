//! Independent reference implementations used by the integration tests and
//! the acceptance target: naive scalar loops over `Vec<Vec<f64>>` and
//! brute-force caption metrics. Nothing here calls into the library's math.

#![allow(dead_code)]

use osic_core::{ParamStore, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

const EPS: f64 = 1e-5;

pub fn mat<T: Scalar>(t: &Tensor<T>) -> Mat {
    (0..t.rows())
        .map(|r| t.row(r).iter().map(|v| v.as_f64()).collect())
        .collect()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    let mut m: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.len(), y.len(), "column count");
        for (p, q) in x.iter().zip(y) {
            m = m.max((p - q).abs());
        }
    }
    m
}

fn param<T: Scalar>(store: &ParamStore<T>, name: &str) -> Mat {
    let p = store
        .by_name(name)
        .unwrap_or_else(|| panic!("no parameter named {name}"));
    mat(&p.value)
}

fn vector<T: Scalar>(store: &ParamStore<T>, name: &str) -> Vec<f64> {
    param(store, name).remove(0)
}

/// Largest `|a - b| / max(1, |b|)`.
pub fn scaled_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs() / q.abs().max(1.0))
        })
        .fold(0.0, f64::max)
}

pub fn transpose(x: &Mat) -> Mat {
    if x.is_empty() {
        return Vec::new();
    }
    (0..x[0].len()).map(|j| x.iter().map(|r| r[j]).collect()).collect()
}

pub fn linear<T: Scalar>(x: &Mat, store: &ParamStore<T>, name: &str) -> Mat {
    let w = param(store, &format!("{name}.weight"));
    let b = vector(store, &format!("{name}.bias"));
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|o| {
                    let mut s = b[o];
                    for k in 0..row.len() {
                        s += row[k] * w[k][o];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn ffn<T: Scalar>(x: &Mat, store: &ParamStore<T>, name: &str) -> Mat {
    let mut h = linear(x, store, &format!("{name}.inner"));
    for row in &mut h {
        for v in row.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    linear(&h, store, &format!("{name}.outer"))
}

fn norm_vec(v: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mut mean = 0.0;
    for x in v {
        mean += x;
    }
    mean /= n;
    let mut var = 0.0;
    for x in v {
        var += (x - mean) * (x - mean);
    }
    var /= n;
    let sd = (var + EPS).sqrt();
    (0..v.len()).map(|i| (v[i] - mean) / sd * gamma[i] + beta[i]).collect()
}

/// Statistics per row (over channels).
pub fn norm_channels<T: Scalar>(x: &Mat, store: &ParamStore<T>, name: &str) -> Mat {
    let g = vector(store, &format!("{name}.gamma"));
    let b = vector(store, &format!("{name}.beta"));
    x.iter().map(|r| norm_vec(r, &g, &b)).collect()
}

/// Statistics per column (over positions).
pub fn norm_positions<T: Scalar>(x: &Mat, store: &ParamStore<T>, name: &str) -> Mat {
    let g = vector(store, &format!("{name}.gamma"));
    let b = vector(store, &format!("{name}.beta"));
    let cols: Mat = transpose(x).iter().map(|c| norm_vec(c, &g, &b)).collect();
    transpose(&cols)
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for x in v {
        max = max.max(*x);
    }
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Multi-head attention with an explicit loop over heads, queries and keys.
pub fn attention<T: Scalar>(q_in: &Mat, kv_in: &Mat, store: &ParamStore<T>, name: &str, heads: usize, causal: bool) -> Mat {
    let q = linear(q_in, store, &format!("{name}.query"));
    let k = linear(kv_in, store, &format!("{name}.key"));
    let v = linear(kv_in, store, &format!("{name}.value"));
    let width = q[0].len();
    let dh = width / heads;
    let scale = (dh as f64).sqrt();
    let mut out = vec![vec![0.0; width]; q.len()];
    for h in 0..heads {
        for i in 0..q.len() {
            let keys = if causal { i + 1 } else { k.len() };
            let mut scores = Vec::with_capacity(keys);
            for j in 0..keys {
                let mut s = 0.0;
                for c in 0..dh {
                    s += q[i][h * dh + c] * k[j][h * dh + c];
                }
                scores.push(s / scale);
            }
            let p = softmax(&scores);
            for c in 0..dh {
                let mut s = 0.0;
                for j in 0..keys {
                    s += p[j] * v[j][h * dh + c];
                }
                out[i][h * dh + c] = s;
            }
        }
    }
    linear(&out, store, &format!("{name}.output"))
}

pub fn squeeze_pool(m: &Mat) -> Vec<f64> {
    let n = m.len() as f64;
    (0..m[0].len()).map(|j| m.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

pub fn squeeze_learnable<T: Scalar>(m: &Mat, store: &ParamStore<T>, name: &str) -> Vec<f64> {
    let w = vector(store, &format!("{name}.squeeze"));
    (0..m[0].len())
        .map(|j| (0..m.len()).map(|p| w[p] * m[p][j]).sum())
        .collect()
}

pub fn excite<T: Scalar>(vs: &[f64], store: &ParamStore<T>, name: &str) -> Vec<f64> {
    let mut h = linear(&vec![vs.to_vec()], store, &format!("{name}.down"));
    for v in h[0].iter_mut() {
        *v = v.max(0.0);
    }
    let e = linear(&h, store, &format!("{name}.up"));
    e[0].iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect()
}

pub fn gated_embedding<T: Scalar>(m: &Mat, gate: &[f64], store: &ParamStore<T>, name: &str) -> Mat {
    let gated: Mat = m
        .iter()
        .map(|r| r.iter().zip(gate).map(|(x, e)| x * e).collect())
        .collect();
    add(&norm_channels(&gated, store, &format!("{name}.norm")), m)
}

/// Block-mean merge of a square grid of `fine` positions onto `coarse`.
pub fn merge(x: &Mat, coarse: usize) -> Mat {
    let fine = x.len();
    let fs = (fine as f64).sqrt().round() as usize;
    let cs = (coarse as f64).sqrt().round() as usize;
    let k = fs / cs;
    let mut out = vec![vec![0.0; x[0].len()]; coarse];
    for p in 0..fine {
        let (r, c) = (p / fs, p % fs);
        let target = (r / k) * cs + c / k;
        for j in 0..x[0].len() {
            out[target][j] += x[p][j] / (k * k) as f64;
        }
    }
    out
}

pub fn multi_sight<T: Scalar>(levels: &[Mat], store: &ParamStore<T>, name: &str) -> Mat {
    let coarse = levels.last().unwrap().len();
    let parts: Vec<Mat> = levels
        .iter()
        .enumerate()
        .map(|(i, l)| merge(&linear(l, store, &format!("{name}.level{i}")), coarse))
        .collect();
    (0..coarse)
        .map(|p| parts.iter().flat_map(|m| m[p].clone()).collect())
        .collect()
}

pub fn spatial<T: Scalar>(x: &Mat, store: &ParamStore<T>, name: &str, heads: usize) -> Mat {
    let a = attention(x, x, store, &format!("{name}.attn"), heads, false);
    add(&norm_positions(&a, store, &format!("{name}.norm")), x)
}

pub fn channel<T: Scalar>(x: &Mat, store: &ParamStore<T>, name: &str, heads: usize) -> Mat {
    let xt = transpose(x);
    let a = transpose(&attention(&xt, &xt, store, &format!("{name}.attn"), heads, false));
    add(&norm_channels(&a, store, &format!("{name}.norm")), x)
}

pub fn parallel<T: Scalar>(x: &Mat, store: &ParamStore<T>, name: &str, heads: usize, channel_heads: usize) -> Mat {
    let s = spatial(x, store, &format!("{name}.spatial"), heads);
    let c = channel(x, store, &format!("{name}.channel"), channel_heads);
    add(&add(&s, &c), x)
}

pub fn cascade<T: Scalar>(x: &Mat, store: &ParamStore<T>, name: &str, heads: usize, channel_heads: usize) -> Mat {
    let s = spatial(x, store, &format!("{name}.spatial"), heads);
    channel(&s, store, &format!("{name}.channel"), channel_heads)
}

/// One refining layer: the mode's block, then the feed-forward stage.
pub fn refine_layer<T: Scalar>(x: &Mat, store: &ParamStore<T>, name: &str, mode: &str, heads: usize, channel_heads: usize) -> Mat {
    let y = match mode {
        "spatial" => spatial(x, store, &format!("{name}.spatial"), heads),
        "channel" => channel(x, store, &format!("{name}.channel"), channel_heads),
        "parallel" => parallel(x, store, name, heads, channel_heads),
        "cascade" => cascade(x, store, name, heads, channel_heads),
        other => panic!("unknown mode {other}"),
    };
    let f = ffn(&y, store, &format!("{name}.ffn"));
    norm_channels(&add(&f, &y), store, &format!("{name}.ffn_norm"))
}

/// Mean negative log-likelihood of the non-PAD (id 0) targets.
pub fn cross_entropy(logits: &Mat, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (row, &t) in logits.iter().zip(targets) {
        if t == 0 {
            continue;
        }
        let p = softmax(row);
        total -= p[t].ln();
        count += 1;
    }
    total / count as f64
}

pub fn sinusoid(pos: usize, i: usize, d: usize) -> f64 {
    let exponent = (2 * (i / 2)) as f64 / d as f64;
    let angle = pos as f64 / 10000f64.powf(exponent);
    if i.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Logits of a post-norm decoder whose parameters live under `name`.
pub fn decoder_logits<T: Scalar>(tokens: &[usize], memory: &Mat, store: &ParamStore<T>, name: &str, layers: usize, heads: usize) -> Mat {
    let emb = param(store, &format!("{name}.embedding"));
    let d = emb[0].len();
    let mut x: Mat = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| (0..d).map(|i| emb[t][i] + sinusoid(p, i, d)).collect())
        .collect();
    for l in 0..layers {
        let pre = format!("{name}.layer{l}");
        let a = attention(&x, &x, store, &format!("{pre}.self_attn"), heads, true);
        x = norm_channels(&add(&x, &a), store, &format!("{pre}.self_norm"));
        let c = attention(&x, memory, store, &format!("{pre}.cross_attn"), heads, false);
        x = norm_channels(&add(&x, &c), store, &format!("{pre}.cross_norm"));
        let f = ffn(&x, store, &format!("{pre}.ffn"));
        x = norm_channels(&add(&x, &f), store, &format!("{pre}.ffn_norm"));
    }
    linear(&x, store, &format!("{name}.output"))
}

pub fn random_mat<T: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize, range: f64) -> Tensor<T> {
    Tensor::from_fn(rows, cols, |_, _| T::of(rng.random_range(-range..range)))
}

/// Overwrites every parameter with uniform noise so biases and norm affines
/// are exercised too.
pub fn scramble<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, range: f64) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = T::of(rng.random_range(-range..range));
        }
    }
}

// ---------------------------------------------------------------------------
// Caption metrics by brute force.

fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            out.push(tokens[i..i + n].to_vec());
        }
    }
    out
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

pub fn brute_bleu(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> [f64; 4] {
    let mut hit = [0.0f64; 4];
    let mut tot = [0.0f64; 4];
    let mut c_len = 0usize;
    let mut r_len = 0usize;
    for (c, rs) in cands.iter().zip(refs) {
        c_len += c.len();
        let mut best = rs[0].len();
        for r in rs {
            let d = (r.len() as i64 - c.len() as i64).abs();
            let bd = (best as i64 - c.len() as i64).abs();
            if d < bd || (d == bd && r.len() < best) {
                best = r.len();
            }
        }
        r_len += best;
        for n in 1..=4 {
            let cg = ngrams(c, n);
            tot[n - 1] += cg.len() as f64;
            for g in distinct(&cg) {
                let mut m = 0;
                for r in rs {
                    m = m.max(count(&ngrams(r, n), &g));
                }
                hit[n - 1] += count(&cg, &g).min(m) as f64;
            }
        }
    }
    let bp = if c_len == 0 {
        0.0
    } else if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let mut out = [0.0; 4];
    for k in 1..=4 {
        let mut prod = 1.0;
        for n in 0..k {
            prod *= if tot[n] == 0.0 { 0.0 } else { hit[n] / tot[n] };
        }
        out[k - 1] = bp * prod.powf(1.0 / k as f64);
    }
    out
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

pub fn brute_rouge(c: &[String], rs: &[Vec<String>]) -> f64 {
    let beta = 1.2f64;
    let mut best: f64 = 0.0;
    for r in rs {
        let l = lcs(c, r) as f64;
        if l == 0.0 {
            continue;
        }
        let p = l / c.len() as f64;
        let rec = l / r.len() as f64;
        best = best.max((1.0 + beta * beta) * p * rec / (rec + beta * beta * p));
    }
    best
}

/// Mean CIDEr-D over the corpus, with idf from its own references.
pub fn brute_cider(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    let images = cands.len();
    let df = |g: &[String]| -> f64 {
        let n = g.len();
        refs.iter()
            .filter(|rs| rs.iter().any(|r| count(&ngrams(r, n), g) > 0))
            .count() as f64
    };
    let weights = |toks: &[String], n: usize| -> Vec<(Vec<String>, f64)> {
        let all = ngrams(toks, n);
        distinct(&all)
            .into_iter()
            .map(|g| {
                let idf = (images as f64).ln() - df(&g).max(1.0).ln();
                let w = count(&all, &g) as f64 * idf;
                (g, w)
            })
            .collect()
    };
    let norm = |v: &[(Vec<String>, f64)]| v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (c, rs) in cands.iter().zip(refs) {
        let mut score = 0.0;
        for n in 1..=4 {
            let h = weights(c, n);
            let mut acc = 0.0;
            for r in rs {
                let rv = weights(r, n);
                let mut dot = 0.0;
                for (g, hw) in &h {
                    if let Some((_, rw)) = rv.iter().find(|(x, _)| x == g) {
                        dot += hw.min(*rw) * rw;
                    }
                }
                let (nh, nr) = (norm(&h), norm(&rv));
                if nh != 0.0 && nr != 0.0 {
                    dot /= nh * nr;
                }
                let delta = c.len() as f64 - r.len() as f64;
                acc += dot * (-(delta * delta) / 72.0).exp();
            }
            score += acc / rs.len() as f64 * 10.0;
        }
        total += score / 4.0;
    }
    total / images as f64
}

/// Twenty images with 1..=5 references each over a small vocabulary; some
/// candidates copy a reference so higher-order n-grams match.
pub fn random_corpus(seed: u64, images: usize) -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
    const WORDS: [&str; 9] = ["a", "the", "red", "cat", "dog", "on", "sits", "mat", "big"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let len = rng.random_range(1..=10);
        (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string()).collect()
    };
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..images {
        let k = rng.random_range(1..=5);
        let rs: Vec<Vec<String>> = (0..k).map(|_| sentence(&mut rng)).collect();
        let c = if rng.random_bool(0.3) {
            let mut c = rs[rng.random_range(0..k)].clone();
            if rng.random_bool(0.5) {
                c.push(WORDS[rng.random_range(0..WORDS.len())].to_string());
            }
            c
        } else {
            sentence(&mut rng)
        };
        cands.push(c);
        refs.push(rs);
    }
    (cands, refs)
}

pub mod checks;
