use std::collections::BTreeMap;

use osic_core::metrics::{bleu, build_idf, cider_d, evaluate, rouge_l, score_corpus, CIDER_SCALE, CIDER_SIGMA};
use proptest::prelude::*;

fn golden() -> (BTreeMap<String, String>, BTreeMap<String, Vec<String>>) {
    let v: serde_json::Value = serde_json::from_str(include_str!("data/golden_corpus.json")).unwrap();
    (
        serde_json::from_value(v["predictions"].clone()).unwrap(),
        serde_json::from_value(v["references"].clone()).unwrap(),
    )
}

// Computed once with the brute-force implementations in tests/support.
const GOLDEN: [(&str, f64); 6] = [
    ("B@1", 0.8674698795),
    ("B@2", 0.7189693895),
    ("B@3", 0.5428813900),
    ("B@4", 0.4002344612),
    ("R", 0.7239430804),
    ("C", 3.0201242339),
];

#[test]
fn golden_corpus_matches_frozen_values() {
    let (preds, refs) = golden();
    let r = evaluate(&preds, &refs).unwrap();
    let got = [r.bleu1, r.bleu2, r.bleu3, r.bleu4, r.rouge_l, r.cider_d];
    for ((name, want), got) in GOLDEN.iter().zip(got) {
        assert!((got - want).abs() < 1e-6, "{name}: {got} vs {want}");
    }
}

#[test]
fn identical_captions_score_exactly_one() {
    let (_, refs) = golden();
    let preds: BTreeMap<String, String> = refs.iter().map(|(k, v)| (k.clone(), v[0].clone())).collect();
    let single: BTreeMap<String, Vec<String>> = refs.iter().map(|(k, v)| (k.clone(), vec![v[0].clone()])).collect();
    let r = evaluate(&preds, &single).unwrap();
    assert_eq!([r.bleu1, r.bleu2, r.bleu3, r.bleu4, r.rouge_l], [1.0; 5]);
}

#[test]
fn single_image_cider_is_exactly_zero() {
    let preds = BTreeMap::from([("x".to_string(), "a cat on a mat".to_string())]);
    let refs = BTreeMap::from([("x".to_string(), vec!["a cat on a mat".to_string()])]);
    assert_eq!(evaluate(&preds, &refs).unwrap().cider_d, 0.0);
}

#[test]
fn mismatched_ids_are_listed() {
    let (mut preds, refs) = golden();
    preds.remove("7");
    preds.insert("99".into(), "a dog".into());
    let msg = evaluate(&preds, &refs).unwrap_err().to_string();
    assert!(msg.contains("99") && msg.contains('7'), "{msg}");
}

fn corpus() -> impl Strategy<Value = (Vec<Vec<String>>, Vec<Vec<Vec<String>>>)> {
    let word = prop::sample::select(vec!["a", "dog", "cat", "runs", "on", "the", "grass", "red"]);
    let sentence = prop::collection::vec(word.prop_map(String::from), 1..8);
    prop::collection::vec((sentence.clone(), prop::collection::vec(sentence, 1..3)), 2..8)
        .prop_map(|items| items.into_iter().unzip())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_are_bounded((cands, refs) in corpus()) {
        let r = score_corpus(&cands, &refs).unwrap();
        for v in [r.bleu1, r.bleu2, r.bleu3, r.bleu4, r.rouge_l] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let idf = build_idf(&refs).unwrap();
        let (_, per) = cider_d(&cands, &refs, &idf, CIDER_SIGMA, CIDER_SCALE).unwrap();
        prop_assert!(per.iter().all(|&c| (0.0..=10.0 + 1e-9).contains(&c)));
    }

    #[test]
    fn corpus_order_does_not_matter((cands, refs) in corpus(), rot in 0usize..8) {
        let k = rot % cands.len();
        let mut c2 = cands.clone();
        let mut r2 = refs.clone();
        c2.rotate_left(k);
        r2.rotate_left(k);
        let (a, b) = (bleu(&cands, &refs).unwrap(), bleu(&c2, &r2).unwrap());
        for n in 0..4 {
            prop_assert!((a[n] - b[n]).abs() < 1e-12);
        }
        let idf = build_idf(&refs).unwrap();
        let idf2 = build_idf(&r2).unwrap();
        let x = cider_d(&cands, &refs, &idf, CIDER_SIGMA, CIDER_SCALE).unwrap().0;
        let y = cider_d(&c2, &r2, &idf2, CIDER_SIGMA, CIDER_SCALE).unwrap().0;
        prop_assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn self_match_maximizes_rouge((cands, refs) in corpus()) {
        for (c, r) in cands.iter().zip(&refs) {
            prop_assert!(rouge_l(c, r) <= rouge_l(&r[0], r) + 1e-12);
            prop_assert_eq!(rouge_l(&r[0], r), 1.0);
        }
    }
}
