//! Text-generation metrics: corpus BLEU-1..4, exact-match METEOR and ROUGE-L,
//! computed over lowercased whitespace tokens.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercase, then split on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus statistics behind a BLEU score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuStats {
    /// Clipped matches per order 1..=k.
    pub matches: Vec<usize>,
    /// Candidate n-grams per order 1..=k.
    pub totals: Vec<usize>,
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuStats {
    pub fn collect<T: Eq + Hash, C: AsRef<[T]>, R: AsRef<[T]>>(candidates: &[C], references: &[R], k: usize) -> Result<Self> {
        if candidates.len() != references.len() {
            return Err(Error::Metrics(format!(
                "{} candidates for {} references",
                candidates.len(),
                references.len()
            )));
        }
        if candidates.is_empty() {
            return Err(Error::Metrics("empty corpus".into()));
        }
        if !(1..=4).contains(&k) {
            return Err(Error::Metrics(format!("BLEU order {k} outside 1..=4")));
        }
        let mut s = BleuStats {
            matches: vec![0; k],
            totals: vec![0; k],
            candidate_len: 0,
            reference_len: 0,
        };
        for (c, r) in candidates.iter().zip(references) {
            let (c, r) = (c.as_ref(), r.as_ref());
            s.candidate_len += c.len();
            s.reference_len += r.len();
            for n in 1..=k {
                let rc = ngram_counts(r, n);
                for (g, cnt) in ngram_counts(c, n) {
                    s.matches[n - 1] += cnt.min(rc.get(g).copied().unwrap_or(0));
                    s.totals[n - 1] += cnt;
                }
            }
        }
        Ok(s)
    }

    /// Uniform-weight geometric mean of `p_1..p_k` times the brevity penalty.
    pub fn score(&self, k: usize) -> f64 {
        if self.candidate_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..k {
            if self.matches[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
        }
        let bp = (1.0 - self.reference_len as f64 / self.candidate_len as f64).exp().min(1.0);
        bp * (log_sum / k as f64).exp()
    }
}

/// Corpus-level BLEU-k with clipped n-gram precision.
pub fn bleu<T: Eq + Hash, C: AsRef<[T]>, R: AsRef<[T]>>(candidates: &[C], references: &[R], k: usize) -> Result<f64> {
    Ok(BleuStats::collect(candidates, references, k)?.score(k))
}

/// Node budget for the chunk-minimizing alignment search; inputs small
/// enough to exhaust it are solved exactly.
pub const METEOR_SEARCH_BUDGET: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeteorDetail {
    pub score: f64,
    pub matches: usize,
    pub chunks: usize,
    /// Whether the alignment search finished within its budget.
    pub exact: bool,
}

struct AlignSearch<'a> {
    cand_ids: Vec<usize>,
    /// Ref positions per word id.
    positions: Vec<Vec<usize>>,
    used: Vec<bool>,
    /// Cand occurrences per word id that may still be left unmatched.
    skips: Vec<usize>,
    /// Remaining matches needed per word id.
    need: Vec<usize>,
    best: usize,
    nodes: usize,
    budget: usize,
    _m: std::marker::PhantomData<&'a ()>,
}

impl AlignSearch<'_> {
    /// `prev`: ref position matched at cand position `i - 1`, if any.
    fn dfs(&mut self, i: usize, prev: Option<usize>, chunks: usize) {
        if chunks >= self.best {
            return;
        }
        self.nodes += 1;
        if self.nodes > self.budget {
            return;
        }
        if i == self.cand_ids.len() {
            self.best = chunks;
            return;
        }
        let w = self.cand_ids[i];
        if w == usize::MAX {
            self.dfs(i + 1, None, chunks);
            return;
        }
        // Continuing the current chunk first finds good solutions early.
        if let Some(p) = prev {
            if self.need[w] > 0 {
                if let Ok(k) = self.positions[w].binary_search(&(p + 1)) {
                    let q = self.positions[w][k];
                    if !self.used[q] {
                        self.take(w, q);
                        self.dfs(i + 1, Some(q), chunks);
                        self.release(w, q);
                    }
                }
            }
        }
        if self.need[w] > 0 {
            for k in 0..self.positions[w].len() {
                let q = self.positions[w][k];
                if self.used[q] || prev.is_some_and(|p| q == p + 1) {
                    continue;
                }
                self.take(w, q);
                self.dfs(i + 1, Some(q), chunks + 1);
                self.release(w, q);
            }
        }
        if self.skips[w] > 0 {
            self.skips[w] -= 1;
            self.dfs(i + 1, None, chunks);
            self.skips[w] += 1;
        }
    }

    fn take(&mut self, w: usize, q: usize) {
        self.used[q] = true;
        self.need[w] -= 1;
    }

    fn release(&mut self, w: usize, q: usize) {
        self.used[q] = false;
        self.need[w] += 1;
    }
}

/// Fewest chunks over all maximum exact-match alignments, plus the match
/// count. Returns `(matches, chunks, exact)`.
fn align<T: Eq + Hash>(cand: &[T], reference: &[T], budget: usize) -> (usize, usize, bool) {
    let mut ids: HashMap<&T, usize> = HashMap::new();
    for t in reference {
        let n = ids.len();
        ids.entry(t).or_insert(n);
    }
    let mut positions = vec![Vec::new(); ids.len()];
    for (j, t) in reference.iter().enumerate() {
        positions[ids[t]].push(j);
    }
    let cand_ids: Vec<usize> = cand.iter().map(|t| ids.get(t).copied().unwrap_or(usize::MAX)).collect();
    let mut cand_count = vec![0usize; ids.len()];
    for &w in &cand_ids {
        if w != usize::MAX {
            cand_count[w] += 1;
        }
    }
    let need: Vec<usize> = (0..ids.len()).map(|w| cand_count[w].min(positions[w].len())).collect();
    let matches: usize = need.iter().sum();
    if matches == 0 {
        return (0, 0, true);
    }
    let skips = (0..ids.len()).map(|w| cand_count[w] - need[w]).collect();
    let mut s = AlignSearch {
        cand_ids,
        positions,
        used: vec![false; reference.len()],
        skips,
        need,
        best: matches + 1,
        nodes: 0,
        budget,
        _m: std::marker::PhantomData,
    };
    s.dfs(0, None, 0);
    let exact = s.nodes <= s.budget;
    (matches, s.best.min(matches), exact)
}

pub fn meteor_detail<T: Eq + Hash>(cand: &[T], reference: &[T]) -> MeteorDetail {
    let (m, chunks, exact) = align(cand, reference, METEOR_SEARCH_BUDGET);
    let score = meteor_formula(m, chunks, cand.len(), reference.len());
    MeteorDetail {
        score,
        matches: m,
        chunks,
        exact,
    }
}

/// Score from alignment statistics: `F = 10PR / (R + 9P)` discounted by
/// `0.5 (chunks / matches)^3`.
pub fn meteor_formula(matches: usize, chunks: usize, cand_len: usize, ref_len: usize) -> f64 {
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let p = m / cand_len as f64;
    let r = m / ref_len as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let frag = chunks as f64 / m;
    f * (1.0 - 0.5 * frag * frag * frag)
}

pub fn meteor<T: Eq + Hash>(cand: &[T], reference: &[T]) -> f64 {
    meteor_detail(cand, reference).score
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeL {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn rouge_l<T: Eq>(cand: &[T], reference: &[T]) -> RougeL {
    let l = lcs_len(cand, reference);
    if l == 0 {
        return RougeL {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        };
    }
    let p = l as f64 / cand.len() as f64;
    let r = l as f64 / reference.len() as f64;
    RougeL {
        precision: p,
        recall: r,
        f1: 2.0 * p * r / (p + r),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub pairs: usize,
    pub candidate_tokens: usize,
    pub reference_tokens: usize,
    /// Pairs whose METEOR alignment search hit its budget.
    pub meteor_inexact: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge: f64,
    pub counts: CorpusCounts,
}

/// Mean that does not depend on input order.
fn order_free_mean(mut v: Vec<f64>) -> f64 {
    let n = v.len() as f64;
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / n
}

/// Corpus BLEU-1..4; METEOR and ROUGE-L F1 averaged over pairs.
pub fn evaluate_corpus<S: AsRef<str>>(pairs: &[(S, S)]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Metrics("no pairs to evaluate".into()));
    }
    let cands: Vec<Vec<String>> = pairs.iter().map(|(c, _)| normalize(c.as_ref())).collect();
    let refs: Vec<Vec<String>> = pairs.iter().map(|(_, r)| normalize(r.as_ref())).collect();
    let stats = BleuStats::collect(&cands, &refs, 4)?;
    let mut meteors = Vec::with_capacity(pairs.len());
    let mut inexact = 0;
    for (c, r) in cands.iter().zip(&refs) {
        let d = meteor_detail(c, r);
        inexact += usize::from(!d.exact);
        meteors.push(d.score);
    }
    let rouges = cands.iter().zip(&refs).map(|(c, r)| rouge_l(c, r).f1).collect();
    Ok(MetricReport {
        bleu1: stats.score(1),
        bleu2: stats.score(2),
        bleu3: stats.score(3),
        bleu4: stats.score(4),
        meteor: order_free_mean(meteors),
        rouge: order_free_mean(rouges),
        counts: CorpusCounts {
            pairs: pairs.len(),
            candidate_tokens: stats.candidate_len,
            reference_tokens: stats.reference_len,
            meteor_inexact: inexact,
        },
    })
}

impl MetricReport {
    pub const NAMES: [&'static str; 6] = ["bleu1", "bleu2", "bleu3", "bleu4", "meteor", "rouge"];

    pub fn values(&self) -> [f64; 6] {
        [self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.meteor, self.rouge]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (n, v) in Self::NAMES.iter().zip(self.values()) {
            s.push_str(&format!("{n},{v}\n"));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<8} {:>8}\n", "metric", "value");
        for (n, v) in Self::NAMES.iter().zip(self.values()) {
            s.push_str(&format!("{n:<8} {v:>8.4}\n"));
        }
        s
    }
}

/// `(a - b) / b`.
pub fn relative_change(a: f64, b: f64) -> Result<f64> {
    if b == 0.0 {
        return Err(Error::Metrics("relative change against a zero baseline".into()));
    }
    Ok((a - b) / b)
}

/// Per-metric relative change of `a` over baseline `b`, as CSV and an aligned
/// table.
pub fn ablation_table(a: &MetricReport, b: &MetricReport) -> (String, String) {
    let mut csv = String::from("metric,a,b,relative_change\n");
    let mut table = format!("{:<8} {:>8} {:>8} {:>10}\n", "metric", "a", "b", "change");
    for ((n, x), y) in MetricReport::NAMES.iter().zip(a.values()).zip(b.values()) {
        match relative_change(x, y) {
            Ok(r) => {
                csv.push_str(&format!("{n},{x},{y},{r}\n"));
                table.push_str(&format!("{n:<8} {x:>8.4} {y:>8.4} {:>9.2}%\n", r * 100.0));
            }
            Err(_) => {
                csv.push_str(&format!("{n},{x},{y},\n"));
                table.push_str(&format!("{n:<8} {x:>8.4} {y:>8.4} {:>10}\n", "n/a"));
            }
        }
    }
    (csv, table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toks(s: &str) -> Vec<String> {
        normalize(s)
    }

    #[test]
    fn bleu_worked_examples() {
        let c = [toks("the the the the the the the")];
        let r = [toks("the cat is on the mat")];
        assert_relative_eq!(bleu(&c, &r, 1).unwrap(), 2.0 / 7.0, epsilon = 1e-12);
        let c = [toks("polyp rectum")];
        let r = [toks("polyp in the rectum")];
        assert_relative_eq!(bleu(&c, &r, 1).unwrap(), (-1f64).exp(), epsilon = 1e-12);
        let same = [toks("a small polyp was found in the rectum")];
        for k in 1..=4 {
            assert_eq!(bleu(&same, &same, k).unwrap(), 1.0);
        }
    }

    #[test]
    fn bleu_errors_and_empty_candidates() {
        let empty: [Vec<String>; 0] = [];
        assert!(bleu(&empty, &empty, 1).is_err());
        assert!(bleu(&[toks("a")], &[toks("a")], 5).is_err());
        assert_eq!(bleu(&[Vec::<String>::new()], &[toks("a b")], 1).unwrap(), 0.0);
    }

    #[test]
    fn meteor_worked_examples() {
        assert_eq!(meteor(&toks("a b"), &toks("c d")), 0.0);
        assert_relative_eq!(meteor(&toks("a b c"), &toks("a b c")), 1.0 - 0.5 / 27.0, epsilon = 1e-12);
        assert_relative_eq!(meteor(&toks("b a"), &toks("a b")), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn meteor_prefers_fewest_chunks() {
        // Greedy left-to-right matching of "the" would split this into 3 chunks.
        let d = meteor_detail(&toks("the polyp the colon"), &toks("the colon the polyp"));
        assert_eq!(d.matches, 4);
        assert_eq!(d.chunks, 2);
        assert!(d.exact);
    }

    #[test]
    fn rouge_worked_examples() {
        assert_eq!(rouge_l(&toks("a b c"), &toks("a b c")).f1, 1.0);
        assert_eq!(rouge_l(&toks("a b"), &toks("c d")).f1, 0.0);
        let r = rouge_l(&toks("a b c d"), &toks("a c b d"));
        assert_relative_eq!(r.f1, 0.75, epsilon = 1e-15);
    }

    #[test]
    fn corpus_evaluation() {
        let pairs = [("A small polyp", "a small polyp"), ("The colon was normal.", "the colon was normal.")];
        let rep = evaluate_corpus(&pairs).unwrap();
        assert_eq!(rep.bleu1, 1.0);
        assert_eq!(rep.bleu2, 1.0);
        assert_eq!(rep.rouge, 1.0);
        let pairs = [("a b c d", "a c b d")];
        assert_relative_eq!(evaluate_corpus(&pairs).unwrap().rouge, 0.75, epsilon = 1e-15);
        assert!(evaluate_corpus::<&str>(&[]).is_err());
    }

    #[test]
    fn relative_change_convention() {
        assert_relative_eq!(relative_change(0.550, 0.318).unwrap(), 0.7296, epsilon = 1e-4);
        assert!(relative_change(1.0, 0.0).is_err());
    }
}
