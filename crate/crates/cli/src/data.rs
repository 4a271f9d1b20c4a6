//! Manifests and images on disk into training items.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use endoreport::model::Stage;
use endoreport::storage::manifest::{read_manifest, validate_splits, Manifest, ManifestRecord, Split};
use endoreport::tokenizer::TokenizerModel;
use endoreport::train::TrainItem;
use endoreport::vision::RawImage;
use rayon::prelude::*;

pub fn manifest_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Caption => "stage1.jsonl",
        Stage::Findings => "stage2.jsonl",
    }
}

pub fn tokenizer_path(data_dir: &Path) -> PathBuf {
    data_dir.join("tokenizer.txt")
}

pub fn load_tokenizer(path: &Path) -> Result<TokenizerModel> {
    TokenizerModel::load(path).with_context(|| format!("loading tokenizer {}", path.display()))
}

/// Reads and checks a manifest: split overlap and unreadable image paths are
/// errors; procedures over the image limit are logged and skipped.
pub fn load_manifest(path: &Path, stage: Stage) -> Result<Manifest> {
    let m = read_manifest(path, stage).with_context(|| format!("reading manifest {}", path.display()))?;
    if let Err(v) = validate_splits(&m.records) {
        let lines: Vec<String> = v.iter().map(ToString::to_string).collect();
        bail!("split overlap in {}:\n  {}", path.display(), lines.join("\n  "));
    }
    m.verify_image_paths()?;
    if !m.excluded.is_empty() {
        eprintln!("{}: {} records excluded for exceeding the image limit", path.display(), m.excluded.len());
    }
    Ok(m)
}

/// Decodes every distinct image once; records sharing a path share the raster.
pub fn load_images<'a>(manifest: &Manifest, records: impl Iterator<Item = &'a ManifestRecord>) -> Result<HashMap<String, Arc<RawImage>>> {
    let mut paths: Vec<&str> = records.flat_map(|r| r.image_paths.iter().map(String::as_str)).collect();
    paths.sort_unstable();
    paths.dedup();
    let loaded: Vec<(String, Arc<RawImage>)> = paths
        .par_iter()
        .map(|p| {
            let full = manifest.image_path(p);
            RawImage::load_png(&full)
                .map(|img| (p.to_string(), Arc::new(img)))
                .with_context(|| format!("decoding {}", full.display()))
        })
        .collect::<Result<_>>()?;
    Ok(loaded.into_iter().collect())
}

pub fn records_in(manifest: &Manifest, split: Option<Split>) -> Vec<&ManifestRecord> {
    manifest
        .records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .collect()
}

pub fn to_items(records: &[&ManifestRecord], images: &HashMap<String, Arc<RawImage>>, tok: &TokenizerModel) -> Vec<TrainItem> {
    records
        .iter()
        .map(|r| TrainItem {
            id: r.record_id.clone(),
            images: r.image_paths.iter().map(|p| images[p].clone()).collect(),
            tokens: tok.encode(&r.text, false).ids,
        })
        .collect()
}

/// Training and validation items of one stage from a corpus directory.
pub fn load_split_items(data_dir: &Path, stage: Stage, tok: &TokenizerModel) -> Result<(Vec<TrainItem>, Vec<TrainItem>)> {
    let m = load_manifest(&data_dir.join(manifest_name(stage)), stage)?;
    let train = records_in(&m, Some(Split::Train));
    let val = records_in(&m, Some(Split::Val));
    if train.is_empty() {
        bail!("no training records in {}", data_dir.display());
    }
    let images = load_images(&m, train.iter().chain(&val).copied())?;
    Ok((to_items(&train, &images, tok), to_items(&val, &images, tok)))
}
