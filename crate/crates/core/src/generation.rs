//! Greedy decoding and cross-attention grounding maps.

use std::path::{Path, PathBuf};

use crate::decoder::{decoder_forward, AttentionTrace, IncrementalDecoder};
use crate::error::{Error, Result};
use crate::fusion::FusedContext;
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::{TokenSequence, TokenizerModel};
use crate::vision::RawImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Eos,
    MaxLen,
}

/// Head-averaged last-layer cross-attention of one generated token, laid out
/// as `[slots, grid, grid]`. Planes of unused image slots are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub token_index: usize,
    pub token_string: String,
    pub weights: Tensor<f64>,
}

impl AttentionMap {
    pub fn slots(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn grid(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn plane(&self, k: usize) -> &[f64] {
        let n = self.grid() * self.grid();
        &self.weights.data()[k * n..(k + 1) * n]
    }

    /// `(slot, row, col)` of the largest weight; earliest wins ties.
    pub fn argmax(&self) -> (usize, usize, usize) {
        let mut best = 0;
        for (i, &w) in self.weights.data().iter().enumerate() {
            if w > self.weights.data()[best] {
                best = i;
            }
        }
        let g = self.grid();
        (best / (g * g), (best / g) % g, best % g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub ids: TokenSequence,
    pub text: String,
    pub maps: Vec<AttentionMap>,
    pub stop_reason: StopReason,
}

/// Index of the largest entry among allowed ids; ties go to the lowest id.
fn argmax_allowed<F: Scalar>(logits: &[F], banned: &[u32]) -> u32 {
    let mut best: Option<usize> = None;
    for (i, &v) in logits.iter().enumerate() {
        if banned.contains(&(i as u32)) {
            continue;
        }
        if best.is_none_or(|b| v > logits[b]) {
            best = Some(i);
        }
    }
    best.expect("vocabulary has non-special tokens") as u32
}

/// Greedy decoding from BOS. Each step appends the argmax token (BOS and PAD
/// are never chosen); stops at EOS, which is not included in `ids`, or after
/// `max_len` tokens. With `grounding`, one attention map per generated token
/// is attached.
pub fn greedy_generate<F: Scalar>(
    context: &FusedContext<F>,
    params: &ParamStore<F>,
    cfg: &ModelConfig,
    tokenizer: &TokenizerModel,
    max_len: usize,
    grounding: bool,
) -> Result<GenerationResult> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let special = tokenizer.special();
    let limit = max_len.min(cfg.decoder.max_seq_len);
    let mut dec = IncrementalDecoder::new(context, params, &cfg.decoder)?;
    let banned = [special.bos, special.pad];
    let mut ids = Vec::new();
    let mut next = special.bos;
    let mut stop_reason = StopReason::MaxLen;
    while ids.len() < limit {
        let logits = dec.step(next)?;
        let tok = argmax_allowed(&logits, &banned);
        if tok == special.eos {
            stop_reason = StopReason::Eos;
            break;
        }
        ids.push(tok);
        next = tok;
    }
    let text = tokenizer.decode(&ids)?;
    let maps = if grounding && !ids.is_empty() {
        let mut input = vec![special.bos];
        input.extend_from_slice(&ids[..ids.len() - 1]);
        let out = decoder_forward(&input, context, params, &cfg.decoder, true)?;
        let labels: Vec<String> = ids.iter().map(|&t| tokenizer.token_str(t)).collect();
        extract_grounding(out.attention_trace.as_ref(), context, &labels)?
    } else {
        Vec::new()
    };
    Ok(GenerationResult {
        ids: TokenSequence::new(ids),
        text,
        maps,
        stop_reason,
    })
}

/// Last decoder layer, averaged over heads, renormalized over valid context
/// positions and reshaped per image slot. Row `i` of the trace becomes map
/// `i`, labelled `labels[i]`.
pub fn extract_grounding<F: Scalar>(
    trace: Option<&AttentionTrace<F>>,
    fused: &FusedContext<F>,
    labels: &[String],
) -> Result<Vec<AttentionMap>> {
    let trace = trace.ok_or(Error::MissingTrace)?;
    let last = trace.layers.last().ok_or(Error::MissingTrace)?;
    let (heads, rows, keys) = (trace.heads, trace.rows, trace.keys);
    if keys != fused.valid.len() || last.len() != heads * rows * keys {
        return Err(Error::Shape(format!(
            "trace [{heads}, {rows}, {keys}] for a context of {} positions",
            fused.valid.len()
        )));
    }
    if labels.len() > rows {
        return Err(Error::Shape(format!("{} labels for {rows} trace rows", labels.len())));
    }
    let grid = (fused.n_patches as f64).sqrt().round() as usize;
    if grid * grid != fused.n_patches {
        return Err(Error::Context(format!("{} patches do not form a square grid", fused.n_patches)));
    }
    let mut maps = Vec::with_capacity(labels.len());
    for (i, label) in labels.iter().enumerate() {
        let mut w = vec![0.0f64; keys];
        for h in 0..heads {
            let row = &last[(h * rows + i) * keys..(h * rows + i + 1) * keys];
            for (acc, &p) in w.iter_mut().zip(row) {
                *acc += p.as_f64();
            }
        }
        for (acc, &ok) in w.iter_mut().zip(&fused.valid) {
            *acc = if ok { *acc / heads as f64 } else { 0.0 };
        }
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            w.iter_mut().for_each(|v| *v /= total);
        }
        maps.push(AttentionMap {
            token_index: i,
            token_string: label.clone(),
            weights: Tensor::new(vec![fused.slots(), grid, grid], w)?,
        });
    }
    Ok(maps)
}

const HIGHLIGHT: [f64; 3] = [255.0, 255.0, 160.0];

/// Blends the weights of one image plane over `base`: each grid cell is
/// upsampled by nearest neighbour, weights are mapped linearly from the
/// plane's min..max onto blend factor 0..0.5 toward a bright highlight.
/// A constant plane leaves the base unchanged.
pub fn overlay(map: &AttentionMap, slot: usize, base: &RawImage) -> Result<RawImage> {
    let grid = map.grid();
    if base.channels != 3 || base.width != base.height || base.width % grid != 0 {
        return Err(Error::Image(format!(
            "base {}x{}x{} does not fit a {grid}x{grid} grid",
            base.width, base.height, base.channels
        )));
    }
    let plane = map.plane(slot);
    let (lo, hi) = plane
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let cell = base.width / grid;
    let mut out = base.clone();
    if hi > lo {
        for y in 0..base.height {
            for x in 0..base.width {
                let w = (plane[(y / cell) * grid + x / cell] - lo) / (hi - lo);
                let alpha = 0.5 * w;
                let px = &mut out.data[(y * base.width + x) * 3..(y * base.width + x) * 3 + 3];
                for c in 0..3 {
                    let v = (1.0 - alpha) * px[c] as f64 + alpha * HIGHLIGHT[c];
                    px[c] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    Ok(out)
}

/// File-name-safe form of a token string.
pub fn sanitize_token(s: &str) -> String {
    let t: String = s
        .trim()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    if t.is_empty() {
        "tok".into()
    } else {
        t
    }
}

/// Sidecar text: one line per grid row, planes separated by a blank line.
pub fn sidecar_text(map: &AttentionMap) -> String {
    let g = map.grid();
    let mut s = String::new();
    for k in 0..map.slots() {
        if k > 0 {
            s.push('\n');
        }
        for row in map.plane(k).chunks(g) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
    }
    s
}

/// Parses [`sidecar_text`] back into `[slots, grid, grid]` weights.
pub fn parse_sidecar(text: &str) -> Result<Tensor<f64>> {
    let mut planes: Vec<Vec<Vec<f64>>> = vec![Vec::new()];
    for line in text.lines() {
        if line.trim().is_empty() {
            planes.push(Vec::new());
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|e| Error::Data(format!("sidecar value `{v}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        planes.last_mut().expect("non-empty").push(row);
    }
    planes.retain(|p| !p.is_empty());
    let grid = planes.first().map_or(0, Vec::len);
    if grid == 0 || planes.iter().any(|p| p.len() != grid || p.iter().any(|r| r.len() != grid)) {
        return Err(Error::Data("sidecar grid is not square and uniform".into()));
    }
    let n = planes.len();
    Tensor::new(vec![n, grid, grid], planes.into_iter().flatten().flatten().collect())
}

/// Writes `tokNNN_<token>.txt` with the raw grid and one overlay
/// `tokNNN_<token>_imgKK.png` per image in `bases`.
pub fn render_heatmap(map: &AttentionMap, bases: &[RawImage], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let stem = format!("tok{:03}_{}", map.token_index, sanitize_token(&map.token_string));
    let mut written = Vec::new();
    let txt = dir.join(format!("{stem}.txt"));
    crate::storage::write_atomic(&txt, sidecar_text(map).as_bytes())?;
    written.push(txt);
    for (k, base) in bases.iter().enumerate().take(map.slots()) {
        let path = dir.join(format!("{stem}_img{k:02}.png"));
        overlay(map, k, base)?.save_png(&path)?;
        written.push(path);
    }
    Ok(written)
}
