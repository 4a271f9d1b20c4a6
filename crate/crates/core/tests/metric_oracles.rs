//! Metrics against brute-force reference implementations on random pairs.

use endoreport::metrics::{bleu, evaluate_corpus, lcs_len, meteor_detail, meteor_formula, rouge_l, BleuStats};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 5] = ["the", "polyp", "colon", "was", "seen"];

fn random_sentence(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<&'static str> {
    let n = rng.random_range(0..=max_len);
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect()
}

fn count_occurrences(hay: &[&str], gram: &[&str]) -> usize {
    if gram.len() > hay.len() {
        return 0;
    }
    (0..=hay.len() - gram.len()).filter(|&i| &hay[i..i + gram.len()] == gram).count()
}

/// Clipped matches and candidate n-gram count, by scanning every distinct
/// n-gram position.
fn clipped(cand: &[&str], reference: &[&str], n: usize) -> (usize, usize) {
    if cand.len() < n {
        return (0, 0);
    }
    let mut matched = 0;
    let mut seen: Vec<&[&str]> = Vec::new();
    for i in 0..=cand.len() - n {
        let g = &cand[i..i + n];
        if seen.contains(&g) {
            continue;
        }
        seen.push(g);
        matched += count_occurrences(cand, g).min(count_occurrences(reference, g));
    }
    (matched, cand.len() - n + 1)
}

fn bleu_oracle(pairs: &[(Vec<&str>, Vec<&str>)], k: usize) -> f64 {
    let c: usize = pairs.iter().map(|p| p.0.len()).sum();
    let r: usize = pairs.iter().map(|p| p.1.len()).sum();
    if c == 0 {
        return 0.0;
    }
    let mut product = 1.0f64;
    let mut logs = 0.0;
    for n in 1..=k {
        let (m, t) = pairs
            .iter()
            .map(|(a, b)| clipped(a, b, n))
            .fold((0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
        if m == 0 {
            product = 0.0;
        } else {
            logs += (m as f64 / t as f64).ln();
        }
    }
    if product == 0.0 {
        return 0.0;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (logs / k as f64).exp()
}

fn lcs_oracle(a: &[&str], b: &[&str]) -> usize {
    // Full quadratic table.
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

fn chunk_count(map: &[Option<usize>]) -> usize {
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for m in map {
        match (*m, prev) {
            (Some(j), Some(p)) if j == p + 1 => {}
            (Some(_), _) => chunks += 1,
            _ => {}
        }
        prev = *m;
    }
    chunks
}

/// Every partial one-to-one alignment of equal words; keeps the largest
/// match count and, among those, the fewest chunks.
fn meteor_oracle(cand: &[&str], reference: &[&str]) -> (usize, usize) {
    fn go(i: usize, cand: &[&str], reference: &[&str], used: &mut Vec<bool>, map: &mut Vec<Option<usize>>, best: &mut (usize, usize)) {
        if i == cand.len() {
            let m = map.iter().flatten().count();
            let c = chunk_count(map);
            if m > best.0 || (m == best.0 && c < best.1) {
                *best = (m, c);
            }
            return;
        }
        for j in 0..reference.len() {
            if !used[j] && reference[j] == cand[i] {
                used[j] = true;
                map.push(Some(j));
                go(i + 1, cand, reference, used, map, best);
                map.pop();
                used[j] = false;
            }
        }
        map.push(None);
        go(i + 1, cand, reference, used, map, best);
        map.pop();
    }
    let mut best = (0, usize::MAX);
    go(0, cand, reference, &mut vec![false; reference.len()], &mut Vec::new(), &mut best);
    if best.0 == 0 {
        (0, 0)
    } else {
        best
    }
}

fn meteor_oracle_score(cand: &[&str], reference: &[&str]) -> f64 {
    let (m, chunks) = meteor_oracle(cand, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = p * r / (0.9 * p + 0.1 * r);
    f * (1.0 - 0.5 * (chunks as f64 / m as f64).powi(3))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

#[test]
fn hundred_random_pairs_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let pairs: Vec<(Vec<&str>, Vec<&str>)> = (0..100)
        .map(|_| (random_sentence(&mut rng, 8), random_sentence(&mut rng, 8)))
        .collect();
    for (c, r) in &pairs {
        let d = meteor_detail(c, r);
        assert!(d.exact);
        let (m, chunks) = meteor_oracle(c, r);
        assert_eq!((d.matches, d.chunks), (m, chunks), "{c:?} / {r:?}");
        assert!(close(d.score, meteor_oracle_score(c, r)), "{c:?} / {r:?}");

        let l = lcs_oracle(c, r);
        assert_eq!(lcs_len(c, r), l);
        let rl = rouge_l(c, r);
        let want = if l == 0 {
            0.0
        } else {
            let (p, q) = (l as f64 / c.len() as f64, l as f64 / r.len() as f64);
            2.0 * p * q / (p + q)
        };
        assert!(close(rl.f1, want));

        for k in 1..=4 {
            let single = [(c.clone(), r.clone())];
            assert!(close(bleu(&[c], &[r], k).unwrap(), bleu_oracle(&single, k)));
        }
    }
    let cands: Vec<&Vec<&str>> = pairs.iter().map(|p| &p.0).collect();
    let refs: Vec<&Vec<&str>> = pairs.iter().map(|p| &p.1).collect();
    for k in 1..=4 {
        let got = bleu(&cands, &refs, k).unwrap();
        let want = bleu_oracle(&pairs, k);
        assert!(close(got, want), "BLEU-{k}: {got} vs {want}");
        if k < 4 {
            assert!(got > 0.0, "BLEU-{k} is zero");
        }
    }
}

#[test]
fn worked_examples() {
    let s = |t: &'static str| t.split(' ').collect::<Vec<_>>();
    let same = s("a polyp was seen in the colon");
    for k in 1..=4 {
        assert_eq!(bleu(&[&same], &[&same], k).unwrap(), 1.0);
    }
    let d = meteor_detail(&same, &same);
    assert_eq!((d.matches, d.chunks), (7, 1));
    assert!(close(d.score, 1.0 - 0.5 / 343.0));
    assert_eq!(rouge_l(&same, &same).f1, 1.0);

    let c = s("the polyp the colon");
    let r = s("the colon the polyp");
    assert_eq!(meteor_oracle(&c, &r), (4, 2));
    assert_eq!(meteor_detail(&c, &r).chunks, 2);
    assert!(close(meteor_formula(4, 2, 4, 4), 1.0 - 0.5 * 0.125));

    // Short candidate: brevity penalty e^(1 - 7/3).
    let short = s("a polyp was");
    let got = bleu(&[&short], &[&same], 1).unwrap();
    assert!(close(got, (1.0f64 - 7.0 / 3.0).exp()));
    assert_eq!(bleu(&[&short], &[&same], 4).unwrap(), 0.0);

    let disjoint = s("normal mucosa");
    assert_eq!(meteor_detail(&disjoint, &same).score, 0.0);
    assert_eq!(rouge_l(&disjoint, &same).f1, 0.0);
}

#[test]
fn stats_expose_counts() {
    let c = vec!["the", "the", "the"];
    let r = vec!["the", "cat"];
    let st = BleuStats::collect(&[&c], &[&r], 2).unwrap();
    assert_eq!(st.matches, vec![1, 0]);
    assert_eq!(st.totals, vec![3, 2]);
}

#[test]
fn long_inputs_fall_back_to_budgeted_search() {
    let c: Vec<&str> = (0..60).map(|i| WORDS[i % 2]).collect();
    let r: Vec<&str> = (0..60).map(|i| WORDS[(i / 3) % 2]).collect();
    let d = meteor_detail(&c, &r);
    assert_eq!(d.matches, 60);
    assert!(d.chunks >= 1 && d.score > 0.0);
}

fn sentence() -> impl Strategy<Value = Vec<&'static str>> {
    prop::collection::vec(prop::sample::select(&WORDS[..]), 0..9)
}

proptest! {
    #[test]
    fn corpus_scores_ignore_pair_order(pairs in prop::collection::vec((sentence(), sentence()), 1..12), seed in any::<u64>()) {
        let text: Vec<(String, String)> = pairs.iter().map(|(a, b)| (a.join(" "), b.join(" "))).collect();
        let mut shuffled = text.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let a = evaluate_corpus(&text).unwrap();
        let b = evaluate_corpus(&shuffled).unwrap();
        prop_assert_eq!(a.values(), b.values());
    }

    #[test]
    fn scores_lie_in_unit_interval(c in sentence(), r in sentence()) {
        let m = meteor_detail(&c, &r).score;
        let f = rouge_l(&c, &r).f1;
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert!((0.0..=1.0).contains(&f));
        for k in 1..=4 {
            let b = bleu(&[&c], &[&r], k).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
        }
    }

    #[test]
    fn identical_pair_scores_one(r in prop::collection::vec(prop::sample::select(&WORDS[..]), 4..9)) {
        for k in 1..=4 {
            prop_assert_eq!(bleu(&[&r], &[&r], k).unwrap(), 1.0);
        }
        prop_assert_eq!(rouge_l(&r, &r).f1, 1.0);
    }

    /// Appending a reference word that the candidate lacks, without
    /// changing candidate length, never lowers BLEU-1.
    #[test]
    fn bleu1_monotone_in_matches(r in prop::collection::vec(prop::sample::select(&WORDS[..]), 3..9), k in 0usize..3) {
        let mut worse = r.clone();
        for w in worse.iter_mut().take(k + 1) {
            *w = "zzz";
        }
        let mut better = worse.clone();
        better[0] = r[0];
        let bw = bleu(&[&worse], &[&r], 1).unwrap();
        let bb = bleu(&[&better], &[&r], 1).unwrap();
        prop_assert!(bb >= bw);
    }
}
