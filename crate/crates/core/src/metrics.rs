//! Caption metrics: corpus BLEU-1..4, ROUGE-L and CIDEr-D, plus the caption
//! tokenizer every metric shares.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_SCALE: f64 = 10.0;
pub const ROUGE_BETA: f64 = 1.2;

/// Lowercase, drop ASCII punctuation, split on whitespace.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// N-gram counts of orders `1..=4`, keyed by space-joined tokens.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NGramStats {
    pub counts: [BTreeMap<String, usize>; MAX_ORDER],
    pub len: usize,
}

impl NGramStats {
    pub fn new<S: AsRef<str>>(tokens: &[S]) -> Self {
        let mut stats = Self {
            len: tokens.len(),
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            for w in tokens.windows(n) {
                let key = w.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ");
                *stats.counts[n - 1].entry(key).or_default() += 1;
            }
        }
        stats
    }

    pub fn total(&self, n: usize) -> usize {
        self.counts[n - 1].values().sum()
    }
}

/// Corpus BLEU-1..4 with clipped counts and the closest-reference-length
/// brevity penalty.
pub fn bleu<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<Vec<S>>]) -> Result<[f64; 4]> {
    if candidates.is_empty() {
        return Err(Error::Data("BLEU needs at least one candidate".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Data(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::Data("every candidate needs at least one reference".into()));
        }
        let c = NGramStats::new(cand);
        let ref_stats: Vec<NGramStats> = refs.iter().map(|r| NGramStats::new(r)).collect();
        cand_len += c.len;
        ref_len += ref_stats
            .iter()
            .map(|r| r.len)
            .min_by_key(|&l| (l.abs_diff(c.len), l))
            .expect("non-empty references");
        for n in 0..MAX_ORDER {
            for (g, &count) in &c.counts[n] {
                let max_ref = ref_stats
                    .iter()
                    .map(|r| r.counts[n].get(g).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                matches[n] += count.min(max_ref);
                totals[n] += count;
            }
        }
    }
    let bp = if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut scores = [0.0; MAX_ORDER];
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..MAX_ORDER {
        if matches[n] == 0 || totals[n] == 0 {
            zero = true;
        } else {
            log_sum += (matches[n] as f64 / totals[n] as f64).ln();
        }
        scores[n] = if zero {
            0.0
        } else {
            bp * (log_sum / (n + 1) as f64).exp()
        };
    }
    Ok(scores)
}

fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure (β = 1.2), best over the references.
pub fn rouge_l<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>]) -> f64 {
    let beta2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .map(|r| {
            let lcs = lcs_len(candidate, r) as f64;
            if lcs == 0.0 {
                return 0.0;
            }
            let p = lcs / candidate.len() as f64;
            let rec = lcs / r.len() as f64;
            (1.0 + beta2) * p * rec / (rec + beta2 * p)
        })
        .fold(0.0, f64::max)
}

/// Document frequencies of n-grams over a reference corpus; each image counts
/// an n-gram at most once.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusIdf {
    pub num_docs: usize,
    pub df: BTreeMap<String, usize>,
}

impl CorpusIdf {
    /// `ln(|I| / max(1, df))`.
    pub fn idf(&self, ngram: &str) -> f64 {
        let df = self.df.get(ngram).copied().unwrap_or(0).max(1);
        (self.num_docs as f64).ln() - (df as f64).ln()
    }
}

pub fn build_idf<S: AsRef<str>>(references: &[Vec<Vec<S>>]) -> Result<CorpusIdf> {
    if references.is_empty() {
        return Err(Error::Data("cannot build idf from an empty corpus".into()));
    }
    let mut df = BTreeMap::new();
    for refs in references {
        let mut seen = std::collections::BTreeSet::new();
        for r in refs {
            let s = NGramStats::new(r);
            for m in &s.counts {
                seen.extend(m.keys().cloned());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    Ok(CorpusIdf {
        num_docs: references.len(),
        df,
    })
}

struct TfIdf {
    vec: [BTreeMap<String, f64>; MAX_ORDER],
    norm: [f64; MAX_ORDER],
    len: usize,
}

fn tfidf(stats: &NGramStats, idf: &CorpusIdf) -> TfIdf {
    let mut vec: [BTreeMap<String, f64>; MAX_ORDER] = Default::default();
    let mut norm = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        for (g, &tf) in &stats.counts[n] {
            let w = tf as f64 * idf.idf(g);
            norm[n] += w * w;
            vec[n].insert(g.clone(), w);
        }
        norm[n] = norm[n].sqrt();
    }
    TfIdf {
        vec,
        norm,
        len: stats.len,
    }
}

/// CIDEr-D of one candidate against its references.
pub fn cider_d_single<S: AsRef<str>>(
    candidate: &[S],
    references: &[Vec<S>],
    idf: &CorpusIdf,
    sigma: f64,
    scale: f64,
) -> f64 {
    if references.is_empty() {
        return 0.0;
    }
    let hyp = tfidf(&NGramStats::new(candidate), idf);
    let mut acc = [0.0; MAX_ORDER];
    for r in references {
        let rv = tfidf(&NGramStats::new(r), idf);
        let delta = hyp.len as f64 - rv.len as f64;
        let penalty = (-(delta * delta) / (2.0 * sigma * sigma)).exp();
        for n in 0..MAX_ORDER {
            let mut val: f64 = hyp.vec[n]
                .iter()
                .map(|(g, &h)| {
                    let rw = rv.vec[n].get(g).copied().unwrap_or(0.0);
                    h.min(rw) * rw
                })
                .sum();
            if hyp.norm[n] != 0.0 && rv.norm[n] != 0.0 {
                val /= hyp.norm[n] * rv.norm[n];
            }
            acc[n] += val * penalty;
        }
    }
    let per_order: f64 = acc.iter().map(|v| v / references.len() as f64 * scale).sum();
    per_order / MAX_ORDER as f64
}

/// Corpus CIDEr-D and the per-image scores.
pub fn cider_d<S: AsRef<str>>(
    candidates: &[Vec<S>],
    references: &[Vec<Vec<S>>],
    idf: &CorpusIdf,
    sigma: f64,
    scale: f64,
) -> Result<(f64, Vec<f64>)> {
    if candidates.len() != references.len() {
        return Err(Error::Data(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let per: Vec<f64> = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| cider_d_single(c, r, idf, sigma, scale))
        .collect();
    Ok((per.iter().sum::<f64>() / per.len() as f64, per))
}

/// Scores reported by `eval`, named like the usual captioning tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    #[serde(rename = "B@1")]
    pub bleu1: f64,
    #[serde(rename = "B@2")]
    pub bleu2: f64,
    #[serde(rename = "B@3")]
    pub bleu3: f64,
    #[serde(rename = "B@4")]
    pub bleu4: f64,
    #[serde(rename = "R")]
    pub rouge_l: f64,
    #[serde(rename = "C")]
    pub cider_d: f64,
}

impl ScoreReport {
    pub const CSV_HEADER: &'static str = "B@1,B@2,B@3,B@4,R,C";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.rouge_l, self.cider_d
        )
    }
}

/// Scores tokenized candidates against tokenized references; CIDEr-D idf comes
/// from the same references.
pub fn score_corpus<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<Vec<S>>]) -> Result<ScoreReport> {
    let b = bleu(candidates, references)?;
    let rouge = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_l(c, r))
        .sum::<f64>()
        / candidates.len() as f64;
    let idf = build_idf(references)?;
    let (cider, _) = cider_d(candidates, references, &idf, CIDER_SIGMA, CIDER_SCALE)?;
    Ok(ScoreReport {
        bleu1: b[0],
        bleu2: b[1],
        bleu3: b[2],
        bleu4: b[3],
        rouge_l: rouge,
        cider_d: cider,
    })
}

/// Scores raw caption maps keyed by image id. Every id must appear in both.
pub fn evaluate(
    predictions: &BTreeMap<String, String>,
    references: &BTreeMap<String, Vec<String>>,
) -> Result<ScoreReport> {
    let missing_refs: Vec<&str> = predictions
        .keys()
        .filter(|k| !references.contains_key(*k))
        .map(String::as_str)
        .collect();
    let missing_preds: Vec<&str> = references
        .keys()
        .filter(|k| !predictions.contains_key(*k))
        .map(String::as_str)
        .collect();
    if !missing_refs.is_empty() || !missing_preds.is_empty() {
        return Err(Error::Data(format!(
            "image ids differ: missing references for [{}]; missing predictions for [{}]",
            missing_refs.join(", "),
            missing_preds.join(", ")
        )));
    }
    let mut cands = Vec::with_capacity(predictions.len());
    let mut refs = Vec::with_capacity(predictions.len());
    for (id, caption) in predictions {
        let r = &references[id];
        if r.is_empty() {
            return Err(Error::Data(format!("image {id} has no references")));
        }
        cands.push(tokenize(caption));
        refs.push(r.iter().map(|s| tokenize(s)).collect::<Vec<_>>());
    }
    score_corpus(&cands, &refs)
}
