//! Seeded generator of endoscopy-like scenes, captions and procedure
//! findings, with exact lesion boxes.
//!
//! Seeds are derived hierarchically (master → patient → procedure → scene)
//! with SplitMix64 and drive ChaCha8 streams, so any patient's data can be
//! regenerated on its own.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Stage;
use crate::rng;
use crate::storage::manifest::{write_manifest, BBox, ManifestRecord, Split};
use crate::tokenizer::TokenizerModel;
use crate::vision::RawImage;

/// Lesions are drawn inside one cell of this many pixels.
pub const CELL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    Esophagus,
    Stomach,
    Duodenum,
    Cecum,
    Colon,
    Rectum,
}

impl Site {
    pub const ALL: [Site; 6] = [
        Site::Esophagus,
        Site::Stomach,
        Site::Duodenum,
        Site::Cecum,
        Site::Colon,
        Site::Rectum,
    ];
    pub const UPPER: [Site; 3] = [Site::Esophagus, Site::Stomach, Site::Duodenum];
    pub const LOWER: [Site; 3] = [Site::Cecum, Site::Colon, Site::Rectum];

    pub fn name(self) -> &'static str {
        match self {
            Site::Esophagus => "esophagus",
            Site::Stomach => "stomach",
            Site::Duodenum => "duodenum",
            Site::Cecum => "cecum",
            Site::Colon => "colon",
            Site::Rectum => "rectum",
        }
    }

    fn color(self) -> [f64; 3] {
        match self {
            Site::Esophagus => [205.0, 160.0, 150.0],
            Site::Stomach => [215.0, 105.0, 85.0],
            Site::Duodenum => [200.0, 175.0, 105.0],
            Site::Cecum => [165.0, 115.0, 155.0],
            Site::Colon => [230.0, 140.0, 120.0],
            Site::Rectum => [150.0, 80.0, 75.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Finding {
    Polyp,
    Ulcer,
    Erosion,
    Normal,
}

impl Finding {
    pub const ALL: [Finding; 4] = [Finding::Polyp, Finding::Ulcer, Finding::Erosion, Finding::Normal];

    pub fn name(self) -> &'static str {
        match self {
            Finding::Polyp => "polyp",
            Finding::Ulcer => "ulcer",
            Finding::Erosion => "erosion",
            Finding::Normal => "normal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Large,
}

impl SizeClass {
    pub fn name(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Large => "large",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub site: Site,
    pub finding: Finding,
    pub size: SizeClass,
    /// Lesion cell `(row, col)` on the `image_size / CELL` grid.
    pub position: (usize, usize),
    pub rng_seed: u64,
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Renders a scene: site-coloured background with shading and noise, plus
/// the lesion (disc for polyp, crescent for ulcer, speckle for erosion)
/// inside its cell. Returns the raster and the box of painted lesion pixels.
pub fn render_scene(spec: &SceneSpec, image_size: usize) -> Result<(RawImage, Option<BBox>)> {
    if image_size < CELL || image_size % CELL != 0 {
        return Err(Error::Config(format!("image_size {image_size} must be a positive multiple of {CELL}")));
    }
    let grid = image_size / CELL;
    if spec.position.0 >= grid || spec.position.1 >= grid {
        return Err(Error::Config(format!("lesion cell {:?} outside a {grid}x{grid} grid", spec.position)));
    }
    let mut rng = rng::stream(spec.rng_seed, 0);
    let base = spec.site.color();
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let n = image_size as f64;
    let mut img = vec![0u8; image_size * image_size * 3];
    for y in 0..image_size {
        for x in 0..image_size {
            let (fx, fy) = (x as f64 / n, y as f64 / n);
            let shade = 1.0 + 0.08 * ((fx * 3.0 + phase).sin() + (fy * 2.0 - phase).cos()) * 0.5;
            let noise: f64 = rng.random_range(-6.0..6.0);
            let px = &mut img[(y * image_size + x) * 3..(y * image_size + x) * 3 + 3];
            for c in 0..3 {
                px[c] = clamp_u8(base[c] * shade + noise);
            }
        }
    }
    if spec.finding == Finding::Normal {
        return Ok((RawImage::rgb(image_size, image_size, img), None));
    }

    let (cy, cx) = (
        (spec.position.0 * CELL + CELL / 2) as f64 - 0.5 + rng.random_range(-1.0..1.0),
        (spec.position.1 * CELL + CELL / 2) as f64 - 0.5 + rng.random_range(-1.0..1.0),
    );
    let r = match spec.size {
        SizeClass::Small => 3.2,
        SizeClass::Large => 6.2,
    };
    let cell_y = spec.position.0 * CELL..(spec.position.0 + 1) * CELL;
    let cell_x = spec.position.1 * CELL..(spec.position.1 + 1) * CELL;
    let mut painted: Vec<(usize, usize, [f64; 3])> = Vec::new();
    match spec.finding {
        Finding::Polyp => {
            for y in cell_y.clone() {
                for x in cell_x.clone() {
                    let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                    if d <= r {
                        let lift = 1.0 - 0.35 * d / r;
                        painted.push((x, y, [250.0 * lift + 5.0, 205.0 * lift, 175.0 * lift]));
                    }
                }
            }
        }
        Finding::Ulcer => {
            let off = 0.55 * r;
            for y in cell_y.clone() {
                for x in cell_x.clone() {
                    let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                    let d2 = ((y as f64 - cy + off).powi(2) + (x as f64 - cx - off * 0.3).powi(2)).sqrt();
                    if d <= r && d2 > 0.8 * r {
                        painted.push((x, y, [248.0, 248.0, 232.0]));
                    }
                }
            }
        }
        Finding::Erosion => {
            let dots = match spec.size {
                SizeClass::Small => 5,
                SizeClass::Large => 12,
            };
            for k in 0..dots {
                let dy: f64 = rng.random_range(-r..r);
                let dx: f64 = rng.random_range(-r..r);
                let col = if k % 3 == 0 { [250.0, 235.0, 225.0] } else { [110.0, 10.0, 20.0] };
                for (oy, ox) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let y = (cy + dy).floor() as isize + oy;
                    let x = (cx + dx).floor() as isize + ox;
                    if cell_y.contains(&(y as usize)) && cell_x.contains(&(x as usize)) && y >= 0 && x >= 0 {
                        painted.push((x as usize, y as usize, col));
                    }
                }
            }
        }
        Finding::Normal => unreachable!(),
    }
    let mut bbox: Option<BBox> = None;
    for &(x, y, col) in &painted {
        let px = &mut img[(y * image_size + x) * 3..(y * image_size + x) * 3 + 3];
        for c in 0..3 {
            px[c] = clamp_u8(col[c]);
        }
        let (x, y) = (x as u32, y as u32);
        bbox = Some(match bbox {
            None => BBox {
                x0: x,
                y0: y,
                x1: x + 1,
                y1: y + 1,
            },
            Some(b) => BBox {
                x0: b.x0.min(x),
                y0: b.y0.min(y),
                x1: b.x1.max(x + 1),
                y1: b.y1.max(y + 1),
            },
        });
    }
    Ok((RawImage::rgb(image_size, image_size, img), bbox))
}

/// `"<finding> <site>"`, with a `large` prefix for large lesions.
pub fn make_caption(spec: &SceneSpec) -> String {
    match (spec.finding, spec.size) {
        (Finding::Normal, _) => format!("normal {}", spec.site.name()),
        (f, SizeClass::Large) => format!("large {} {}", f.name(), spec.site.name()),
        (f, SizeClass::Small) => format!("{} {}", f.name(), spec.site.name()),
    }
}

fn sentence(spec: &SceneSpec) -> String {
    match spec.finding {
        Finding::Normal => format!("The {} was normal.", spec.site.name()),
        f => format!("A {} {} was found in the {}.", spec.size.name(), f.name(), spec.site.name()),
    }
}

/// One sentence per scene in capture order.
pub fn make_findings(scenes: &[SceneSpec]) -> String {
    scenes.iter().map(sentence).collect::<Vec<_>>().join(" ")
}

/// What one findings sentence states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Statement {
    pub finding: Finding,
    pub size: Option<SizeClass>,
    pub site: Site,
}

impl Statement {
    pub fn of(spec: &SceneSpec) -> Self {
        Self {
            finding: spec.finding,
            size: (spec.finding != Finding::Normal).then_some(spec.size),
            site: spec.site,
        }
    }
}

fn parse_site(s: &str) -> Option<Site> {
    Site::ALL.into_iter().find(|x| x.name() == s)
}

/// Parses one findings sentence (with or without its final period).
pub fn parse_sentence(s: &str) -> Option<Statement> {
    let words: Vec<&str> = s.trim().trim_end_matches('.').split_whitespace().collect();
    match words.as_slice() {
        ["The", site, "was", "normal"] => Some(Statement {
            finding: Finding::Normal,
            size: None,
            site: parse_site(site)?,
        }),
        ["A", size, finding, "was", "found", "in", "the", site] => Some(Statement {
            finding: Finding::ALL.into_iter().find(|f| f.name() == *finding && *f != Finding::Normal)?,
            size: Some(match *size {
                "small" => SizeClass::Small,
                "large" => SizeClass::Large,
                _ => return None,
            }),
            site: parse_site(site)?,
        }),
        _ => None,
    }
}

/// Sentences of a findings text in order; `None` for unparseable ones.
pub fn parse_findings(text: &str) -> Vec<Option<Statement>> {
    text.split_inclusive('.')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse_sentence)
        .collect()
}

fn default_procedures() -> (usize, usize) {
    (1, 2)
}

fn default_scenes() -> (usize, usize) {
    (1, 12)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_patients: usize,
    /// Inclusive range of procedures per patient.
    #[serde(default = "default_procedures")]
    pub procedures_per_patient: (usize, usize),
    /// Inclusive range of scenes per procedure.
    #[serde(default = "default_scenes")]
    pub scenes_per_procedure: (usize, usize),
    pub image_size: usize,
    /// Train, validation and test fractions of patients.
    pub split_fractions: [f64; 3],
    pub master_seed: u64,
    /// Size of the BPE vocabulary trained on the training texts.
    pub vocab_size: usize,
    /// Whole-word tokens added after BPE training.
    #[serde(default)]
    pub lexicon: Vec<String>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_patients: 600,
            procedures_per_patient: default_procedures(),
            scenes_per_procedure: default_scenes(),
            image_size: 64,
            split_fractions: [0.8, 0.1, 0.1],
            master_seed: 0,
            vocab_size: 512,
            lexicon: ["polyp", "ulcer", "erosion"].map(String::from).to_vec(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        let (a, b) = self.procedures_per_patient;
        if a == 0 || a > b {
            return bad(format!("procedures_per_patient range {a}..={b} is invalid"));
        }
        let (a, b) = self.scenes_per_procedure;
        if a == 0 || a > b {
            return bad(format!("scenes_per_procedure range {a}..={b} is invalid"));
        }
        let s: f64 = self.split_fractions.iter().sum();
        if (s - 1.0).abs() > 1e-9 || self.split_fractions.iter().any(|&f| f < 0.0) {
            return bad(format!("split fractions {:?} must be non-negative and sum to 1", self.split_fractions));
        }
        if self.image_size < CELL || self.image_size % CELL != 0 {
            return bad(format!("image_size must be a positive multiple of {CELL}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub record_id: String,
    pub spec: SceneSpec,
    pub caption: String,
    pub image: Arc<RawImage>,
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone)]
pub struct ProcedureSample {
    pub procedure_id: String,
    pub patient_id: String,
    pub scenes: Vec<RenderedScene>,
    pub findings_text: String,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub procedures: Vec<ProcedureSample>,
    pub tokenizer: TokenizerModel,
}

const TAG_SPLIT: u64 = 0x5350_4c49_54;
const TAG_PATIENT: u64 = 0x5041_5449_454e;

fn scene_spec(rng: &mut impl Rng, upper: bool, grid: usize, seed: u64) -> SceneSpec {
    let sites = if upper { Site::UPPER } else { Site::LOWER };
    let site = sites[rng.random_range(0..3)];
    let u: f64 = rng.random();
    let finding = if u < 0.4 {
        Finding::Normal
    } else if u < 0.65 {
        Finding::Polyp
    } else if u < 0.85 {
        Finding::Ulcer
    } else {
        Finding::Erosion
    };
    let size = if rng.random_bool(0.5) { SizeClass::Small } else { SizeClass::Large };
    let position = (rng.random_range(0..grid), rng.random_range(0..grid));
    SceneSpec {
        site,
        finding,
        size,
        position,
        rng_seed: seed,
    }
}

/// Patient-level split assignment: a seeded permutation of patients cut at
/// the configured fractions.
pub fn assign_splits(cfg: &CorpusConfig) -> Vec<Split> {
    let n = cfg.n_patients;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(cfg.master_seed, TAG_SPLIT));
    let n_train = (cfg.split_fractions[0] * n as f64).round() as usize;
    let n_val = ((cfg.split_fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let mut out = vec![Split::Test; n];
    for (rank, &p) in order.iter().enumerate() {
        out[p] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

/// Procedures of one patient, regenerated from the master seed alone.
pub fn generate_patient(cfg: &CorpusConfig, patient: usize, split: Split) -> Result<Vec<ProcedureSample>> {
    let pseed = rng::derive_seed(cfg.master_seed, TAG_PATIENT + patient as u64);
    let mut prng = rng::stream(pseed, 0);
    let (pa, pb) = cfg.procedures_per_patient;
    let n_proc = prng.random_range(pa..=pb);
    let patient_id = format!("p{patient:04}");
    let grid = cfg.image_size / CELL;
    let mut out = Vec::with_capacity(n_proc);
    for k in 0..n_proc {
        let qseed = rng::derive_seed(pseed, 1 + k as u64);
        let mut qrng = rng::stream(qseed, 0);
        let upper = qrng.random_bool(0.5);
        let (sa, sb) = cfg.scenes_per_procedure;
        let n_scenes = qrng.random_range(sa..=sb);
        let procedure_id = format!("{patient_id}-{}{k}", if upper { "egd" } else { "col" });
        let mut scenes = Vec::with_capacity(n_scenes);
        for s in 0..n_scenes {
            let sseed = rng::derive_seed(qseed, 1 + s as u64);
            let spec = scene_spec(&mut rng::stream(sseed, 0), upper, grid, sseed);
            let (image, bbox) = render_scene(&spec, cfg.image_size)?;
            scenes.push(RenderedScene {
                record_id: format!("{procedure_id}-s{s:02}"),
                caption: make_caption(&spec),
                spec,
                image: Arc::new(image),
                bbox,
            });
        }
        let specs: Vec<SceneSpec> = scenes.iter().map(|s| s.spec).collect();
        out.push(ProcedureSample {
            procedure_id,
            patient_id: patient_id.clone(),
            findings_text: make_findings(&specs),
            scenes,
            split,
        });
    }
    Ok(out)
}

/// Builds the whole corpus in memory, including the tokenizer trained on the
/// training split's captions and findings.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let splits = assign_splits(cfg);
    let mut procedures = Vec::new();
    for (p, &split) in splits.iter().enumerate() {
        procedures.extend(generate_patient(cfg, p, split)?);
    }
    let mut texts: Vec<&str> = Vec::new();
    for proc_ in procedures.iter().filter(|p| p.split == Split::Train) {
        texts.push(&proc_.findings_text);
        texts.extend(proc_.scenes.iter().map(|s| s.caption.as_str()));
    }
    if texts.is_empty() {
        return Err(Error::Data("training split is empty; increase n_patients".into()));
    }
    let mut tokenizer = TokenizerModel::train_bpe(&texts, cfg.vocab_size)?;
    if !cfg.lexicon.is_empty() {
        tokenizer = tokenizer.apply_domain_lexicon(&cfg.lexicon)?;
    }
    Ok(Corpus {
        config: cfg.clone(),
        procedures,
        tokenizer,
    })
}

pub fn image_rel_path(record_id: &str) -> String {
    format!("images/{record_id}.png")
}

impl Corpus {
    pub fn stage1_records(&self) -> Vec<ManifestRecord> {
        let mut out = Vec::new();
        for p in &self.procedures {
            for s in &p.scenes {
                out.push(ManifestRecord {
                    record_id: s.record_id.clone(),
                    patient_id: p.patient_id.clone(),
                    procedure_id: p.procedure_id.clone(),
                    stage: Stage::Caption,
                    image_paths: vec![image_rel_path(&s.record_id)],
                    text: s.caption.clone(),
                    split: p.split,
                    boxes: Some(vec![s.bbox]),
                });
            }
        }
        out
    }

    pub fn stage2_records(&self) -> Vec<ManifestRecord> {
        self.procedures
            .iter()
            .map(|p| ManifestRecord {
                record_id: p.procedure_id.clone(),
                patient_id: p.patient_id.clone(),
                procedure_id: p.procedure_id.clone(),
                stage: Stage::Findings,
                image_paths: p.scenes.iter().map(|s| image_rel_path(&s.record_id)).collect(),
                text: p.findings_text.clone(),
                split: p.split,
                boxes: Some(p.scenes.iter().map(|s| s.bbox).collect()),
            })
            .collect()
    }

    pub fn images(&self) -> HashMap<String, Arc<RawImage>> {
        self.procedures
            .iter()
            .flat_map(|p| p.scenes.iter())
            .map(|s| (image_rel_path(&s.record_id), s.image.clone()))
            .collect()
    }

    pub fn summary(&self) -> CorpusSummary {
        let mut s = CorpusSummary::default();
        for p in &self.procedures {
            let i = Split::ALL.iter().position(|&x| x == p.split).expect("known split");
            s.procedures[i] += 1;
            s.images[i] += p.scenes.len();
        }
        for (i, split) in Split::ALL.iter().enumerate() {
            let mut ids: Vec<&str> = self
                .procedures
                .iter()
                .filter(|p| p.split == *split)
                .map(|p| p.patient_id.as_str())
                .collect();
            ids.dedup();
            s.patients[i] = ids.len();
        }
        s.vocab_size = self.tokenizer.vocab_size();
        s
    }

    /// Writes `images/*.png`, `stage1.jsonl`, `stage2.jsonl`,
    /// `tokenizer.txt` and `corpus.json` under `dir`. Manifests are written
    /// last so a failed run leaves none behind.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("images"))?;
        for p in &self.procedures {
            for s in &p.scenes {
                s.image.save_png(&dir.join(image_rel_path(&s.record_id)))?;
            }
        }
        self.tokenizer.save(&dir.join("tokenizer.txt"))?;
        let info = serde_json::json!({
            "config": self.config,
            "summary": self.summary(),
            "tokenizer_hash": self.tokenizer.content_hash(),
        });
        crate::storage::write_atomic(
            &dir.join("corpus.json"),
            (serde_json::to_string_pretty(&info).expect("json") + "\n").as_bytes(),
        )?;
        write_manifest(&dir.join("stage1.jsonl"), &self.stage1_records())?;
        write_manifest(&dir.join("stage2.jsonl"), &self.stage2_records())?;
        Ok(())
    }
}

/// Counts per split (train, val, test).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub patients: [usize; 3],
    pub procedures: [usize; 3],
    pub images: [usize; 3],
    pub vocab_size: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(site: Site, finding: Finding, size: SizeClass) -> SceneSpec {
        SceneSpec {
            site,
            finding,
            size,
            position: (2, 1),
            rng_seed: 99,
        }
    }

    #[test]
    fn caption_templates() {
        assert_eq!(make_caption(&spec(Site::Rectum, Finding::Polyp, SizeClass::Small)), "polyp rectum");
        assert_eq!(make_caption(&spec(Site::Esophagus, Finding::Normal, SizeClass::Large)), "normal esophagus");
        assert_eq!(make_caption(&spec(Site::Stomach, Finding::Ulcer, SizeClass::Large)), "large ulcer stomach");
    }

    #[test]
    fn findings_templates() {
        let s = spec(Site::Rectum, Finding::Polyp, SizeClass::Small);
        assert_eq!(make_findings(&[s]), "A small polyp was found in the rectum.");
        let n = [Site::Esophagus, Site::Stomach, Site::Duodenum].map(|x| spec(x, Finding::Normal, SizeClass::Small));
        assert_eq!(
            make_findings(&n),
            "The esophagus was normal. The stomach was normal. The duodenum was normal."
        );
    }

    #[test]
    fn render_is_deterministic_and_boxed() {
        for f in Finding::ALL {
            for size in [SizeClass::Small, SizeClass::Large] {
                let s = spec(Site::Colon, f, size);
                let (a, ba) = render_scene(&s, 64).unwrap();
                let (b, bb) = render_scene(&s, 64).unwrap();
                assert_eq!(a, b);
                assert_eq!(ba, bb);
                assert_eq!(ba.is_none(), f == Finding::Normal);
                if let Some(bx) = ba {
                    assert!(bx.x0 >= 16 && bx.x1 <= 32 && bx.y0 >= 32 && bx.y1 <= 48, "{bx:?}");
                }
            }
        }
    }

    #[test]
    fn normal_scene_is_background_only() {
        let (bg, _) = render_scene(&spec(Site::Colon, Finding::Normal, SizeClass::Small), 64).unwrap();
        let (lesion, b) = render_scene(&spec(Site::Colon, Finding::Polyp, SizeClass::Large), 64).unwrap();
        let b = b.unwrap();
        for y in 0..64u32 {
            for x in 0..64u32 {
                let i = ((y * 64 + x) * 3) as usize;
                if !b.contains(x, y) {
                    assert_eq!(bg.data[i..i + 3], lesion.data[i..i + 3]);
                }
            }
        }
    }

    #[test]
    fn sites_have_distinct_mean_colour() {
        let means: Vec<[u64; 3]> = Site::ALL
            .iter()
            .map(|&s| {
                let (img, _) = render_scene(&spec(s, Finding::Normal, SizeClass::Small), 64).unwrap();
                let mut m = [0u64; 3];
                for px in img.data.chunks(3) {
                    for c in 0..3 {
                        m[c] += px[c] as u64;
                    }
                }
                m
            })
            .collect();
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                assert_ne!(means[i], means[j]);
            }
        }
    }

    #[test]
    fn findings_parse_back() {
        let scenes = [
            spec(Site::Cecum, Finding::Erosion, SizeClass::Large),
            spec(Site::Colon, Finding::Normal, SizeClass::Small),
        ];
        let parsed = parse_findings(&make_findings(&scenes));
        let want: Vec<_> = scenes.iter().map(|s| Some(Statement::of(s))).collect();
        assert_eq!(parsed, want);
        assert_eq!(parse_findings("A small thing happened."), vec![None]);
    }

    #[test]
    fn splits_use_configured_fractions() {
        let cfg = CorpusConfig {
            n_patients: 50,
            ..CorpusConfig::default()
        };
        let s = assign_splits(&cfg);
        assert_eq!(s.iter().filter(|&&x| x == Split::Train).count(), 40);
        assert_eq!(s.iter().filter(|&&x| x == Split::Val).count(), 5);
        assert_eq!(s.iter().filter(|&&x| x == Split::Test).count(), 5);
    }
}
