//! Line-delimited JSON manifests: one record object per line.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{max_image_filter, MAX_IMAGES};
use crate::model::Stage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Pixel box `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn area(&self) -> u64 {
        (self.x1.saturating_sub(self.x0) as u64) * (self.y1.saturating_sub(self.y0) as u64)
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub record_id: String,
    pub patient_id: String,
    pub procedure_id: String,
    pub stage: Stage,
    /// Relative to the manifest's directory.
    pub image_paths: Vec<String>,
    pub text: String,
    pub split: Split,
    /// One entry per image; `None` for images without a lesion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<Option<BBox>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExcludedRecord {
    pub line: usize,
    pub record_id: String,
    pub image_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    /// Stage-2 records dropped for having more than the image limit.
    pub excluded: Vec<ExcludedRecord>,
}

impl Manifest {
    pub fn image_path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Fails on the first image path that is not a readable file.
    pub fn verify_image_paths(&self) -> Result<()> {
        for r in &self.records {
            for p in &r.image_paths {
                let full = self.image_path(p);
                if !full.is_file() {
                    return Err(Error::Data(format!(
                        "record `{}`: image {} is not a readable file",
                        r.record_id,
                        full.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn parse_manifest(text: &str, stage: Stage, root: PathBuf) -> Result<Manifest> {
    let mut records = Vec::new();
    let mut excluded = Vec::new();
    let mut seen = HashSet::new();
    let mut any = false;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        any = true;
        let bad = |msg: String| Error::Manifest { line: line_no, msg };
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if !seen.insert(rec.record_id.clone()) {
            return Err(bad(format!("duplicate record_id `{}`", rec.record_id)));
        }
        if rec.stage != stage {
            return Err(bad(format!("stage {} record in a stage {stage} manifest", rec.stage)));
        }
        let n = rec.image_paths.len();
        if let Some(b) = &rec.boxes {
            if b.len() != n {
                return Err(bad(format!("{} boxes for {n} images", b.len())));
            }
        }
        match stage {
            Stage::Caption if n != 1 => return Err(bad(format!("stage 1 record with {n} images"))),
            Stage::Findings if n == 0 => return Err(bad("stage 2 record without images".into())),
            Stage::Findings if !max_image_filter(n, MAX_IMAGES) => {
                excluded.push(ExcludedRecord {
                    line: line_no,
                    record_id: rec.record_id,
                    image_count: n,
                });
                continue;
            }
            _ => {}
        }
        records.push(rec);
    }
    if !any {
        return Err(Error::Manifest {
            line: 0,
            msg: "manifest is empty".into(),
        });
    }
    Ok(Manifest { root, records, excluded })
}

pub fn read_manifest(path: &Path, stage: Stage) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, stage, root)
}

pub fn manifest_to_string(records: &[ManifestRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    super::write_atomic(path, manifest_to_string(records).as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdKind {
    Patient,
    Procedure,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitViolation {
    pub kind: IdKind,
    pub id: String,
    pub splits: Vec<Split>,
}

impl std::fmt::Display for SplitViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.kind {
            IdKind::Patient => "patient",
            IdKind::Procedure => "procedure",
        };
        let splits: Vec<&str> = self.splits.iter().map(|s| s.as_str()).collect();
        write!(f, "{kind} `{}` appears in splits {}", self.id, splits.join(", "))
    }
}

/// Every patient or procedure id that occurs in more than one split.
pub fn validate_splits(records: &[ManifestRecord]) -> std::result::Result<(), Vec<SplitViolation>> {
    let mut patients: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    let mut procedures: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    for r in records {
        patients.entry(&r.patient_id).or_default().insert(r.split);
        procedures.entry(&r.procedure_id).or_default().insert(r.split);
    }
    let mut out = Vec::new();
    for (kind, map) in [(IdKind::Patient, patients), (IdKind::Procedure, procedures)] {
        for (id, splits) in map {
            if splits.len() > 1 {
                out.push(SplitViolation {
                    kind,
                    id: id.to_string(),
                    splits: splits.into_iter().collect(),
                });
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, patient: &str, n: usize, split: Split) -> ManifestRecord {
        ManifestRecord {
            record_id: id.into(),
            patient_id: patient.into(),
            procedure_id: format!("{patient}-proc"),
            stage: Stage::Findings,
            image_paths: (0..n).map(|i| format!("images/{id}_{i}.png")).collect(),
            text: "The colon was normal.".into(),
            split,
            boxes: None,
        }
    }

    fn parse(records: &[ManifestRecord]) -> Result<Manifest> {
        parse_manifest(&manifest_to_string(records), Stage::Findings, PathBuf::new())
    }

    #[test]
    fn thirteen_images_are_excluded_and_counted() {
        let m = parse(&[rec("a", "p1", 12, Split::Train), rec("b", "p2", 13, Split::Train)]).unwrap();
        assert_eq!(m.records.len(), 1);
        assert_eq!(m.excluded.len(), 1);
        assert_eq!(m.excluded[0].record_id, "b");
        assert_eq!(m.excluded[0].line, 2);
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(parse_manifest("", Stage::Caption, PathBuf::new()).is_err());
        assert!(parse_manifest("\n\n", Stage::Caption, PathBuf::new()).is_err());
    }

    #[test]
    fn order_is_preserved() {
        let rs = [rec("c", "p1", 1, Split::Train), rec("a", "p2", 2, Split::Val), rec("b", "p3", 3, Split::Test)];
        let m = parse(&rs).unwrap();
        assert_eq!(m.records, rs.to_vec());
    }

    #[test]
    fn malformed_and_duplicate_lines_name_the_line() {
        let mut text = manifest_to_string(&[rec("a", "p1", 1, Split::Train)]);
        text.push_str("{not json\n");
        match parse_manifest(&text, Stage::Findings, PathBuf::new()) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let text = manifest_to_string(&[rec("a", "p1", 1, Split::Train), rec("a", "p2", 1, Split::Train)]);
        match parse_manifest(&text, Stage::Findings, PathBuf::new()) {
            Err(Error::Manifest { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("duplicate"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_fields_and_wrong_stage_are_rejected() {
        let line = r#"{"record_id":"a","patient_id":"p","procedure_id":"q","stage":2,"image_paths":["x"],"text":"t","split":"train","extra":1}"#;
        assert!(parse_manifest(line, Stage::Findings, PathBuf::new()).is_err());
        let line = r#"{"record_id":"a","patient_id":"p","procedure_id":"q","stage":2,"image_paths":["x"],"text":"t","split":"train"}"#;
        assert!(parse_manifest(line, Stage::Caption, PathBuf::new()).is_err());
    }

    #[test]
    fn split_violations() {
        assert!(validate_splits(&[rec("a", "p1", 1, Split::Train)]).is_ok());
        let mut b = rec("b", "p1", 1, Split::Test);
        b.procedure_id = "other".into();
        let v = validate_splits(&[rec("a", "p1", 1, Split::Train), b]).unwrap_err();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, IdKind::Patient);
        assert_eq!(v[0].id, "p1");
        assert!(v[0].to_string().contains("p1"));
    }
}
