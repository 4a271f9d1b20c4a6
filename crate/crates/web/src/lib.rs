//! Browser bindings for the demo page: scene rendering, the learning-rate
//! schedule and metric scoring with tokenizer segmentation.

use endoreport::metrics::evaluate_corpus;
use endoreport::synth::{make_caption, make_findings, render_scene, Finding, SceneSpec, SizeClass, Site};
use endoreport::tokenizer::TokenizerModel;
use endoreport::train::{lr_at, TrainConfig};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn parse_site(s: &str) -> Result<Site, JsError> {
    Site::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| err(format!("unknown site `{s}`")))
}

fn parse_finding(s: &str) -> Result<Finding, JsError> {
    Finding::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| err(format!("unknown finding `{s}`")))
}

/// A rendered scene as RGBA pixels plus its lesion box and texts.
#[wasm_bindgen]
pub struct Scene {
    size: usize,
    rgba: Vec<u8>,
    info: String,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    /// `size * size * 4` bytes, ready for `ImageData`.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// JSON: `{caption, sentence, box}` with `box` null for normal scenes.
    pub fn info(&self) -> String {
        self.info.clone()
    }
}

#[wasm_bindgen]
pub fn scene(site: &str, finding: &str, large: bool, row: usize, col: usize, seed: u64, size: usize) -> Result<Scene, JsError> {
    let spec = SceneSpec {
        site: parse_site(site)?,
        finding: parse_finding(finding)?,
        size: if large { SizeClass::Large } else { SizeClass::Small },
        position: (row, col),
        rng_seed: seed,
    };
    let (img, bbox) = render_scene(&spec, size).map_err(err)?;
    let rgba = img.data.chunks(img.channels).flat_map(|p| [p[0], p[1], p[2], 255]).collect();
    let info = json!({
        "caption": make_caption(&spec),
        "sentence": make_findings(&[spec]),
        "box": bbox,
    });
    Ok(Scene {
        size,
        rgba,
        info: info.to_string(),
    })
}

/// Learning rate at every update of a `total`-update run.
#[wasm_bindgen]
pub fn lr_curve(total: usize, peak: f64, warmup_frac: f64, floor_frac: f64) -> Result<Vec<f64>, JsError> {
    let cfg = TrainConfig {
        peak_lr: peak,
        warmup_frac,
        lr_floor_frac: floor_frac,
        ..TrainConfig::stage1()
    };
    cfg.validate().map_err(err)?;
    (0..total).map(|s| lr_at(s, total, &cfg).map_err(err)).collect()
}

/// JSON metric report for one generated/reference pair.
#[wasm_bindgen]
pub fn score(generated: &str, reference: &str) -> Result<String, JsError> {
    let report = evaluate_corpus(&[(generated, reference)]).map_err(err)?;
    serde_json::to_string(&report).map_err(err)
}

/// JSON array of token strings under the general-purpose vocabulary, with
/// or without the clinical lexicon.
#[wasm_bindgen]
pub fn segment(text: &str, lexicon: bool) -> Result<String, JsError> {
    let mut tok = TokenizerModel::generic();
    if lexicon {
        tok = tok.apply_domain_lexicon(&["polyp", "ulcer", "erosion"]).map_err(err)?;
    }
    let pieces: Vec<String> = tok.encode(text, false).ids.iter().map(|&id| tok.token_str(id)).collect();
    serde_json::to_string(&pieces).map_err(err)
}
