mod common;

use capcore::metrics::{
    align, bleu, cider, count_chunks, evaluate_corpus, lcs_len, meteor_pair, rouge_l, rouge_l_single, stem,
    CiderIdf, EvalPair, MetricConfig,
};
use common::{read_expected, read_pairs};
use proptest::prelude::*;

const ORACLE_TOL: f64 = 1e-9;

fn fixture(name: &str) -> String {
    std::fs::read_to_string(format!("{}/tests/oracle/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn check_against_oracle(pairs_file: &str, expected_file: &str) {
    let pairs = read_pairs(&fixture(pairs_file));
    let expected = read_expected(&fixture(expected_file));
    assert_eq!(expected["pairs"] as usize, pairs.len());
    let report = evaluate_corpus(&pairs, &MetricConfig::default()).unwrap();
    for (name, value) in report.scores() {
        let want = expected[name];
        assert!((value - want).abs() <= ORACLE_TOL, "{name}: {value} vs oracle {want}");
    }
}

#[test]
fn golden_fixture_matches_oracle() {
    check_against_oracle("golden_pairs.txt", "golden_expected.txt");
}

#[test]
fn three_video_cider_matches_oracle() {
    check_against_oracle("cider3_pairs.txt", "cider3_expected.txt");
    let pairs = read_pairs(&fixture("cider3_pairs.txt"));
    let want = read_expected(&fixture("cider3_expected.txt"))["cider"];
    assert!((cider(&pairs).unwrap() - want).abs() <= ORACLE_TOL);
}

#[test]
fn all_correct_corpus() {
    let pairs = read_pairs(&fixture("golden_pairs.txt"));
    let exact: Vec<EvalPair> = pairs
        .iter()
        .map(|p| EvalPair::new(p.references[0].clone(), p.references.clone()).unwrap())
        .collect();
    let r = evaluate_corpus(&exact, &MetricConfig::default()).unwrap();
    assert_eq!(r.bleu, [1.0; 4]);
    assert_eq!(r.rouge_l, 1.0);
    // METEOR of an exact copy is 1 - 0.5 / m^3 with one chunk.
    let m: f64 = exact
        .iter()
        .map(|p| 1.0 - 0.5 / (p.hypothesis.len() as f64).powi(3))
        .sum::<f64>()
        / exact.len() as f64;
    assert!((r.meteor - m).abs() < 1e-12);
    assert!(r.cider > 0.0 && r.cider <= 10.0);
}

#[test]
fn disjoint_corpus_scores_zero() {
    let pairs = vec![
        EvalPair::from_text("x y z", &["a b c"]).unwrap(),
        EvalPair::from_text("q", &["d e"]).unwrap(),
    ];
    let r = evaluate_corpus(&pairs, &MetricConfig::default()).unwrap();
    for (name, v) in r.scores() {
        assert_eq!(v, 0.0, "{name}");
    }
}

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["a", "the", "man", "dog", "runs", "running", "ran", "walks", "walked", "red", "car"])
        .prop_map(String::from)
}

fn sentence(min: usize, max: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(word(), min..=max)
}

fn eval_pair() -> impl Strategy<Value = EvalPair> {
    (sentence(0, 9), prop::collection::vec(sentence(1, 9), 1..=3))
        .prop_map(|(h, r)| EvalPair::new(h, r).unwrap())
}

/// Fewest chunks over every maximum alignment, by enumeration.
fn brute_chunks(h: &[String], r: &[String]) -> (usize, usize) {
    fn go(i: usize, h: &[String], r: &[String], used: &mut Vec<bool>, links: &mut Vec<(usize, usize)>, best: &mut (usize, usize)) {
        if i == h.len() {
            let key = (links.len(), count_chunks(links));
            if key.0 > best.0 || (key.0 == best.0 && key.1 < best.1) {
                *best = key;
            }
            return;
        }
        go(i + 1, h, r, used, links, best);
        for j in 0..r.len() {
            if !used[j] && stem(&h[i]) == stem(&r[j]) {
                used[j] = true;
                links.push((i, j));
                go(i + 1, h, r, used, links, best);
                links.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0);
    go(0, h, r, &mut vec![false; r.len()], &mut Vec::new(), &mut best);
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    // 100 cases of 10 pairs each.
    #[test]
    fn scores_stay_in_range(pairs in prop::collection::vec(eval_pair(), 10)) {
        let cfg = MetricConfig::default();
        let b = bleu(&pairs, 4, false).unwrap();
        for v in &b {
            prop_assert!((0.0..=1.0).contains(v));
        }
        for v in bleu(&pairs, 4, true).unwrap() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!((0.0..=1.0).contains(&rouge_l(&pairs, 1.2).unwrap()));
        for p in &pairs {
            let m = meteor_pair(p, &cfg);
            prop_assert!((0.0..=1.0).contains(&m));
        }
        if let Ok(idf) = CiderIdf::new(&pairs) {
            for p in &pairs {
                let c = idf.score(p);
                prop_assert!((0.0..=10.0 + 1e-12).contains(&c), "{}", c);
            }
        }
    }

    #[test]
    fn extending_a_correct_prefix_keeps_bleu1(
        others in prop::collection::vec(eval_pair(), 0..5),
        reference in sentence(2, 9),
        cut in 1usize..8,
    ) {
        let cut = cut.min(reference.len() - 1);
        let score = |k: usize| {
            let mut corpus = others.clone();
            corpus.push(EvalPair::new(reference[..k].to_vec(), vec![reference.clone()]).unwrap());
            bleu(&corpus, 1, false).unwrap()[0]
        };
        prop_assert!(score(cut + 1) >= score(cut));
    }

    #[test]
    fn shuffling_a_correct_hypothesis(reference in sentence(1, 9), seed in any::<u64>()) {
        let mut shuffled = reference.clone();
        capcore::Rng::new(seed).shuffle(&mut shuffled);
        let exact = EvalPair::new(reference.clone(), vec![reference.clone()]).unwrap();
        let moved = EvalPair::new(shuffled.clone(), vec![reference.clone()]).unwrap();
        let b_exact = bleu(std::slice::from_ref(&exact), 2, true).unwrap();
        let b_moved = bleu(std::slice::from_ref(&moved), 2, true).unwrap();
        prop_assert_eq!(b_exact[0], b_moved[0]);
        prop_assert!(b_moved[1] <= b_exact[1]);
        prop_assert!(rouge_l(&[moved], 1.2).unwrap() <= rouge_l(&[exact], 1.2).unwrap());
    }

    #[test]
    fn rouge_symmetry(a in sentence(1, 8), b in sentence(1, 8)) {
        let eq = |x: f64, y: f64| (x - y).abs() < 1e-12;
        prop_assert!(eq(rouge_l_single(&a, &b, 1.0), rouge_l_single(&b, &a, 1.0)));
        let swapped = eq(rouge_l_single(&a, &b, 1.2), rouge_l_single(&b, &a, 1.2));
        if a.len() == b.len() {
            // Equal lengths give P = R, and the F-measure no longer depends on beta.
            prop_assert!(swapped);
        } else if lcs_len(&a, &b) > 0 {
            prop_assert!(!swapped);
        }
    }

    #[test]
    fn copying_the_reference_maximizes_cider(
        refs in prop::collection::vec(sentence(1, 7), 3..8),
        other in sentence(0, 7),
        pick in any::<prop::sample::Index>(),
    ) {
        let pairs: Vec<EvalPair> = refs.iter().map(|r| EvalPair::new(r.clone(), vec![r.clone()]).unwrap()).collect();
        if let Ok(idf) = CiderIdf::new(&pairs) {
            let i = pick.index(pairs.len());
            let alt = EvalPair::new(other, pairs[i].references.clone()).unwrap();
            prop_assert!(idf.score(&pairs[i]) + 1e-12 >= idf.score(&alt));
        }
    }

    #[test]
    fn alignment_search_is_optimal(h in sentence(0, 7), r in sentence(1, 7)) {
        let a = align(&h, &r, true, usize::MAX);
        prop_assert_eq!((a.pairs.len(), a.chunks), brute_chunks(&h, &r));
        prop_assert_eq!(count_chunks(&a.pairs), a.chunks);
    }
}

#[test]
fn hand_checked_examples() {
    let w = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    assert!((rouge_l_single(&w("the cat"), &w("the cat sat"), 1.2) - 0.77215).abs() < 5e-6);
    let p = EvalPair::from_text("a b c", &["a b c"]).unwrap();
    assert!((meteor_pair(&p, &MetricConfig::default()) - 0.98148).abs() < 5e-6);
    let p = EvalPair::from_text("the the the the", &["the the cat"]).unwrap();
    assert_eq!(bleu(&[p], 1, false).unwrap()[0], 0.5);
}
