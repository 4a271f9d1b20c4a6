//! Self-check suites run by `endoreport verify`.

use std::fmt;

use anyhow::Result;
use endoreport::autograd::Graph;
use endoreport::decoder::{decoder_forward, IncrementalDecoder};
use endoreport::generation::greedy_generate;
use endoreport::gradcheck::grad_check;
use endoreport::metrics::{bleu, lcs_len, meteor_detail, rouge_l};
use endoreport::model::{build_context, context_loss, example_loss, Example, ModelConfig, Stage};
use endoreport::params::ParamStore;
use endoreport::tokenizer::{SpecialIds, TokenizerModel};
use endoreport::train::{prepare_example, TrainItem};
use endoreport::vision::{preprocess, RawImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Gradcheck,
    Invariants,
    Oracles,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail,
    }
}

pub fn run_suite(suite: Suite, inject_fault: bool) -> Result<Vec<Check>> {
    match suite {
        Suite::Gradcheck => gradcheck(inject_fault),
        Suite::Invariants => invariants(inject_fault),
        Suite::Oracles => oracles(inject_fault),
    }
}

const SPECIAL: SpecialIds = SpecialIds {
    bos: 61,
    eos: 62,
    pad: 63,
};

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> RawImage {
    RawImage::rgb(size, size, (0..size * size * 3).map(|_| rng.random()).collect())
}

fn random_example(rng: &mut ChaCha8Rng, cfg: &ModelConfig, images: usize) -> Result<Example<f64>> {
    let item = TrainItem {
        id: String::new(),
        images: (0..images).map(|_| std::sync::Arc::new(random_image(rng, 32))).collect(),
        tokens: (0..6).map(|_| rng.random_range(0..61)).collect(),
    };
    Ok(prepare_example(&item, cfg)?)
}

/// Finite differences against backward on the tiny model (vocab 64, two
/// image slots), covering a full two-image context, a one-image context with
/// a masked slot, and the single-image caption path. The fault adds a loss
/// term that backward does not see.
fn gradcheck(inject_fault: bool) -> Result<Vec<Check>> {
    let cfg = ModelConfig::tiny(64);
    let mut params: ParamStore<f64> = cfg.init_params(17)?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let two = random_example(&mut rng, &cfg, 2)?;
    let one = random_example(&mut rng, &cfg, 1)?;
    let report = grad_check(
        |g: &mut Graph<f64>| {
            let a = example_loss(g, &two, &cfg, Stage::Findings, SPECIAL)?;
            let b = example_loss(g, &one, &cfg, Stage::Findings, SPECIAL)?;
            let c = example_loss(g, &one, &cfg, Stage::Caption, SPECIAL)?;
            let ab = g.add(a, b)?;
            let mut total = g.add(ab, c)?;
            if inject_fault {
                let p = g.param("decoder.head.bias")?;
                let v = g.value(p).clone();
                let hidden = g.constant(v);
                let s = g.sum(hidden);
                total = g.add(total, s)?;
            }
            Ok(total)
        },
        &mut params,
        1e-5,
        240,
        5,
    )?;
    let worst = report.worst().map(|w| format!("{}[{}]", w.param, w.index)).unwrap_or_default();
    Ok(vec![
        check(
            "coordinates",
            report.checks.len() >= 200 && report.params_covered() == params.len(),
            format!("{} coordinates over {}/{} tensors", report.checks.len(), report.params_covered(), params.len()),
        ),
        check(
            "max relative error",
            report.max_rel_err < 1e-4,
            format!("{:.3e} at {worst} (limit 1e-4)", report.max_rel_err),
        ),
    ])
}

fn small_tokenizer() -> Result<TokenizerModel> {
    Ok(TokenizerModel::train_bpe(&["a small polyp in the colon", "the stomach was normal"], 280)?)
}

fn invariants(inject_fault: bool) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let tok = small_tokenizer()?;
    let sp = tok.special();
    let cfg = ModelConfig {
        max_images: 12,
        ..ModelConfig::tiny(tok.vocab_size())
    };
    let vocab = tok.vocab_size() as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    // Causality.
    let mut broken = 0;
    let cases = 100;
    for case in 0..cases {
        let params: ParamStore<f64> = cfg.init_params(case)?;
        let n = rng.random_range(1..=3);
        let images: Vec<_> = (0..n).map(|_| preprocess::<f64>(&random_image(&mut rng, 32), &cfg.encoder)).collect::<Result<_, _>>()?;
        let ctx = build_context(&images, &params, &cfg, Stage::Findings)?;
        let len = rng.random_range(2..=16);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
        let t = rng.random_range(0..len - 1);
        let mut mutated = tokens.clone();
        let from = if inject_fault { t } else { t + 1 };
        for tk in mutated.iter_mut().skip(from) {
            *tk = (*tk + 1 + rng.random_range(0..vocab - 1)) % vocab;
        }
        let a = decoder_forward(&tokens, &ctx, &params, &cfg.decoder, false)?.logits;
        let b = decoder_forward(&mutated, &ctx, &params, &cfg.decoder, false)?.logits;
        let same = (0..=t).all(|r| a.row(r).iter().zip(b.row(r)).all(|(x, y)| x.to_bits() == y.to_bits()));
        broken += usize::from(!same);
    }
    out.push(check("causality", broken == 0, format!("{broken}/{cases} cases changed earlier logits")));

    // Dummy slots, cached decoding, determinism and map normalization.
    let mut dummy_bad = 0;
    let mut cache_bad = 0;
    let mut repeat_bad = 0;
    let mut norm_bad = 0;
    let mut maps = 0;
    let trials = 6;
    for seed in 0..trials {
        let params: ParamStore<f64> = cfg.init_params(100 + seed)?;
        let n = rng.random_range(1..12);
        let images: Vec<_> = (0..n).map(|_| preprocess::<f64>(&random_image(&mut rng, 32), &cfg.encoder)).collect::<Result<_, _>>()?;
        let ctx = build_context(&images, &params, &cfg, Stage::Findings)?;
        let mut noisy = ctx.clone();
        for r in n * ctx.n_patches..ctx.memory.rows() {
            noisy.memory.row_mut(r).iter_mut().for_each(|v| *v = rng.random_range(-50.0..50.0));
        }
        if inject_fault {
            noisy.memory.row_mut(0)[0] += 1.0;
        }
        let tokens: Vec<u32> = (0..8).map(|_| rng.random_range(0..sp.bos)).collect();
        let l0 = context_loss(&ctx, &tokens, &params, &cfg, sp)?;
        let l1 = context_loss(&noisy, &tokens, &params, &cfg, sp)?;
        let g0 = greedy_generate(&ctx, &params, &cfg, &tok, 12, true)?;
        let g1 = greedy_generate(&noisy, &params, &cfg, &tok, 12, true)?;
        dummy_bad += usize::from(l0.to_bits() != l1.to_bits() || g0 != g1);
        let g2 = greedy_generate(&ctx, &params, &cfg, &tok, 12, true)?;
        repeat_bad += usize::from(g0 != g2);

        let full = decoder_forward(&tokens, &ctx, &params, &cfg.decoder, false)?.logits;
        let mut dec = IncrementalDecoder::new(&ctx, &params, &cfg.decoder)?;
        for (i, &t) in tokens.iter().enumerate() {
            let row = dec.step(t)?;
            if !row.iter().zip(full.row(i)).all(|(a, b)| a.to_bits() == b.to_bits()) {
                cache_bad += 1;
                break;
            }
        }
        for m in &g0.maps {
            maps += 1;
            let total: f64 = m.weights.data().iter().sum();
            let dummy_zero = (n..m.slots()).all(|k| m.plane(k).iter().all(|&w| w == 0.0));
            if (total - 1.0).abs() > 1e-6 || !dummy_zero || m.weights.data().iter().any(|&w| w < 0.0) {
                norm_bad += 1;
            }
        }
    }
    out.push(check(
        "dummy-slot invariance",
        dummy_bad == 0,
        format!("{dummy_bad}/{trials} contexts changed loss or output"),
    ));
    out.push(check("cached decoding", cache_bad == 0, format!("{cache_bad}/{trials} sequences differ from the full pass")));
    out.push(check("determinism", repeat_bad == 0, format!("{repeat_bad}/{trials} repeated generations differ")));
    out.push(check(
        "attention maps",
        norm_bad == 0 && maps > 0,
        format!("{norm_bad}/{maps} maps not normalized or leaking into dummy slots"),
    ));
    Ok(out)
}

const WORDS: [&str; 5] = ["the", "polyp", "colon", "was", "seen"];

fn count(hay: &[&str], g: &[&str]) -> usize {
    if g.len() > hay.len() {
        return 0;
    }
    (0..=hay.len() - g.len()).filter(|&i| &hay[i..i + g.len()] == g).count()
}

fn brute_bleu(c: &[&str], r: &[&str], k: usize) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let mut logs = 0.0;
    for n in 1..=k {
        if c.len() < n {
            return 0.0;
        }
        let mut m = 0;
        let mut seen: Vec<&[&str]> = Vec::new();
        for i in 0..=c.len() - n {
            let g = &c[i..i + n];
            if !seen.contains(&g) {
                seen.push(g);
                m += count(c, g).min(count(r, g));
            }
        }
        if m == 0 {
            return 0.0;
        }
        logs += (m as f64 / (c.len() - n + 1) as f64).ln();
    }
    let bp = if c.len() > r.len() { 1.0 } else { (1.0 - r.len() as f64 / c.len() as f64).exp() };
    bp * (logs / k as f64).exp()
}

fn brute_lcs(a: &[&str], b: &[&str]) -> usize {
    // Every subsequence of the shorter side, longest first.
    let (s, l) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let is_subseq = |sub: &[&str]| {
        let mut it = l.iter();
        sub.iter().all(|x| it.any(|y| y == x))
    };
    let mut best = 0;
    for mask in 0u32..(1 << s.len()) {
        let sub: Vec<&str> = (0..s.len()).filter(|i| mask & (1 << i) != 0).map(|i| s[i]).collect();
        if sub.len() > best && is_subseq(&sub) {
            best = sub.len();
        }
    }
    best
}

fn brute_meteor(c: &[&str], r: &[&str]) -> (usize, usize) {
    fn go(i: usize, c: &[&str], r: &[&str], used: &mut [bool], map: &mut Vec<Option<usize>>, best: &mut (usize, usize)) {
        if i == c.len() {
            let m = map.iter().flatten().count();
            let mut chunks = 0;
            let mut prev: Option<usize> = None;
            for x in map.iter() {
                if let Some(j) = x {
                    if prev.is_none_or(|p| *j != p + 1) {
                        chunks += 1;
                    }
                }
                prev = *x;
            }
            if m > best.0 || (m == best.0 && chunks < best.1) {
                *best = (m, chunks);
            }
            return;
        }
        for j in 0..r.len() {
            if !used[j] && r[j] == c[i] {
                used[j] = true;
                map.push(Some(j));
                go(i + 1, c, r, used, map, best);
                map.pop();
                used[j] = false;
            }
        }
        map.push(None);
        go(i + 1, c, r, used, map, best);
        map.pop();
    }
    let mut best = (0, usize::MAX);
    go(0, c, r, &mut vec![false; r.len()], &mut Vec::new(), &mut best);
    if best.0 == 0 {
        (0, 0)
    } else {
        best
    }
}

/// BLEU, METEOR and ROUGE-L against exhaustive reference computations on
/// 100 random pairs of at most 8 tokens. The fault nudges every computed
/// score by 1e-9.
fn oracles(inject_fault: bool) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let nudge = if inject_fault { 1e-9 } else { 0.0 };
    let sentence = |rng: &mut ChaCha8Rng| -> Vec<&'static str> {
        let n = rng.random_range(0..=8);
        (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect()
    };
    let (mut bleu_bad, mut meteor_bad, mut rouge_bad) = (0, 0, 0);
    let (mut bleu_err, mut meteor_err, mut rouge_err) = (0.0f64, 0.0f64, 0.0f64);
    let pairs = 100;
    for _ in 0..pairs {
        let c = sentence(&mut rng);
        let r = sentence(&mut rng);
        for k in 1..=4 {
            let e = (bleu(&[&c], &[&r], k)? + nudge - brute_bleu(&c, &r, k)).abs();
            bleu_err = bleu_err.max(e);
            bleu_bad += usize::from(e > 1e-12);
        }
        let (m, chunks) = brute_meteor(&c, &r);
        let want = if m == 0 {
            0.0
        } else {
            let (p, q) = (m as f64 / c.len() as f64, m as f64 / r.len() as f64);
            p * q / (0.9 * p + 0.1 * q) * (1.0 - 0.5 * (chunks as f64 / m as f64).powi(3))
        };
        let d = meteor_detail(&c, &r);
        let e = (d.score + nudge - want).abs();
        meteor_err = meteor_err.max(e);
        meteor_bad += usize::from(e > 1e-12 || !d.exact);

        let l = brute_lcs(&c, &r);
        let want = if l == 0 {
            0.0
        } else {
            let (p, q) = (l as f64 / c.len() as f64, l as f64 / r.len() as f64);
            2.0 * p * q / (p + q)
        };
        let e = (rouge_l(&c, &r).f1 + nudge - want).abs();
        rouge_err = rouge_err.max(e);
        rouge_bad += usize::from(e > 1e-12 || lcs_len(&c, &r) != l);
    }
    Ok(vec![
        check("bleu", bleu_bad == 0, format!("{bleu_bad} mismatches in {} scores, max error {bleu_err:.1e}", pairs * 4)),
        check("meteor", meteor_bad == 0, format!("{meteor_bad}/{pairs} mismatches, max error {meteor_err:.1e}")),
        check("rouge-l", rouge_bad == 0, format!("{rouge_bad}/{pairs} mismatches, max error {rouge_err:.1e}")),
    ])
}
