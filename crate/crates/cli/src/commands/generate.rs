use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use endoreport::generation::{greedy_generate, render_heatmap, GenerationResult, StopReason};
use endoreport::model::{build_context, ModelConfig, Stage};
use endoreport::params::ParamStore;
use endoreport::storage::checkpoint::{load_checkpoint, Checkpoint};
use endoreport::storage::manifest::Split;
use endoreport::storage::write_atomic;
use endoreport::tensor::Scalar;
use endoreport::tokenizer::TokenizerModel;
use endoreport::vision::{preprocess, RawImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data;

pub struct GenerateArgs {
    pub ckpt: PathBuf,
    pub manifest: PathBuf,
    pub stage: Stage,
    pub tokenizer: Option<PathBuf>,
    /// `None` keeps every split.
    pub split: Option<Split>,
    pub out: PathBuf,
    pub attn: bool,
}

/// One line of a reports file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRecord {
    pub id: String,
    pub generated: String,
    pub reference: String,
}

pub const REPORTS_FILE: &str = "reports.jsonl";

pub fn generate_one<F: Scalar>(
    images: &[&RawImage],
    params: &ParamStore<F>,
    model: &ModelConfig,
    tok: &TokenizerModel,
    stage: Stage,
    max_len: usize,
    grounding: bool,
) -> Result<GenerationResult> {
    let tensors = images
        .iter()
        .map(|r| preprocess::<F>(r, &model.encoder))
        .collect::<endoreport::Result<Vec<_>>>()?;
    let ctx = build_context(&tensors, params, model, stage)?;
    Ok(greedy_generate(&ctx, params, model, tok, max_len, grounding)?)
}

pub fn read_reports(path: &Path) -> Result<Vec<ReportRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).with_context(|| format!("{} line {}", path.display(), i + 1))?);
    }
    if out.is_empty() {
        bail!("{} holds no records", path.display());
    }
    Ok(out)
}

pub fn run<F: Scalar>(cfg: &RunConfig, args: &GenerateArgs) -> Result<()> {
    let tok_path = match &args.tokenizer {
        Some(p) => p.clone(),
        None => data::tokenizer_path(args.manifest.parent().unwrap_or(Path::new("."))),
    };
    let tok = data::load_tokenizer(&tok_path)?;
    let ck: Checkpoint<F> = load_checkpoint(&args.ckpt, None).with_context(|| format!("loading {}", args.ckpt.display()))?;
    ck.require_tokenizer(&tok.content_hash())
        .with_context(|| format!("{} was trained with a different tokenizer", args.ckpt.display()))?;
    let model = ck.model.clone();
    if model.decoder.vocab_size != tok.vocab_size() {
        bail!("checkpoint vocabulary {} differs from tokenizer {}", model.decoder.vocab_size, tok.vocab_size());
    }
    let manifest = data::load_manifest(&args.manifest, args.stage)?;
    let records = data::records_in(&manifest, args.split);
    if records.is_empty() {
        bail!("no records to generate from in {}", args.manifest.display());
    }
    let images = data::load_images(&manifest, records.iter().copied())?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_atomic(&args.out.join("config.toml"), cfg.to_toml()?.as_bytes())?;

    let max_len = cfg.generate.max_len;
    let results: Vec<GenerationResult> = records
        .par_iter()
        .map(|r| {
            let imgs: Vec<&RawImage> = r.image_paths.iter().map(|p| images[p].as_ref()).collect();
            generate_one(&imgs, &ck.params, &model, &tok, args.stage, max_len, args.attn)
                .with_context(|| format!("generating for `{}`", r.record_id))
        })
        .collect::<Result<_>>()?;

    let mut lines = String::new();
    let mut capped = 0;
    for (r, g) in records.iter().zip(&results) {
        capped += usize::from(g.stop_reason == StopReason::MaxLen);
        let rec = ReportRecord {
            id: r.record_id.clone(),
            generated: g.text.clone(),
            reference: r.text.clone(),
        };
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
        if args.attn {
            let bases: Vec<RawImage> = r.image_paths.iter().map(|p| images[p].as_ref().clone()).collect();
            let dir = args.out.join("attn").join(&r.record_id);
            for m in &g.maps {
                render_heatmap(m, &bases, &dir)?;
            }
        }
    }
    write_atomic(&args.out.join(REPORTS_FILE), lines.as_bytes())?;
    eprintln!(
        "{} reports written to {} ({} stopped at the length limit)",
        results.len(),
        args.out.join(REPORTS_FILE).display(),
        capped
    );
    Ok(())
}
