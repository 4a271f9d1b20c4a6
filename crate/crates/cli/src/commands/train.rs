use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use endoreport::model::Stage;
use endoreport::storage::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use endoreport::storage::write_atomic;
use endoreport::tensor::Scalar;
use endoreport::train::{curve_csv_header, curve_csv_row, train, OptimizerState, TrainConfig, TrainProgress};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data;

/// What a training checkpoint records besides tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub stage: Stage,
    pub progress: TrainProgress,
    pub train: TrainConfig,
}

pub struct TrainArgs {
    pub data: PathBuf,
    pub stage: Stage,
    /// `None` starts from fresh initialization.
    pub init: Option<PathBuf>,
    pub out: PathBuf,
    pub resume: bool,
    /// Stop (successfully) after this many epochs of this invocation.
    pub halt_after: Option<usize>,
}

pub fn epoch_checkpoint(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("epoch_{epoch:03}.ckpt"))
}

/// Highest-numbered epoch checkpoint in `out`.
fn latest_epoch_checkpoint(out: &Path) -> Result<Option<PathBuf>> {
    if !out.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(out)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(n) = name.strip_prefix("epoch_").and_then(|s| s.strip_suffix(".ckpt")) {
            if let Ok(e) = n.parse::<usize>() {
                if best.as_ref().is_none_or(|(b, _)| e > *b) {
                    best = Some((e, path));
                }
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// CSV rows (newline-terminated) whose epoch, read from column
/// `epoch_col`, precedes `keep_epochs`; for resumption.
fn kept_rows(path: &Path, epoch_col: usize, keep_epochs: usize) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .nth(epoch_col)
                .and_then(|e| e.parse::<usize>().ok())
                .is_some_and(|e| e < keep_epochs)
        })
        .map(|l| format!("{l}\n"))
        .collect())
}

pub fn run<F: Scalar>(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let tc = cfg.stage(args.stage).clone();
    let tok = data::load_tokenizer(&data::tokenizer_path(&args.data))?;
    let hash = tok.content_hash();
    let model = cfg.model.build(tok.vocab_size())?;
    let (train_items, val_items) = data::load_split_items(&args.data, args.stage, &tok)?;
    eprintln!(
        "stage {}: {} training and {} validation records, vocabulary {}",
        args.stage,
        train_items.len(),
        val_items.len(),
        tok.vocab_size()
    );
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let resume_from = if args.resume { latest_epoch_checkpoint(&args.out)? } else { None };
    let (mut params, mut optimizer, progress) = match &resume_from {
        Some(path) => {
            let ck: Checkpoint<F> = load_checkpoint(path, Some(&model)).with_context(|| format!("loading {}", path.display()))?;
            ck.require_tokenizer(&hash)?;
            let meta: TrainMeta = serde_json::from_value(ck.meta).context("checkpoint lacks training metadata")?;
            if meta.stage != args.stage || meta.train != tc {
                bail!("{} was written by a different training configuration", path.display());
            }
            let opt = ck.optimizer.context("checkpoint lacks optimizer state")?;
            eprintln!("resuming after epoch {} from {}", meta.progress.epochs_done, path.display());
            (ck.params, OptimizerState::from_snapshot(opt), meta.progress)
        }
        None => {
            let params = match &args.init {
                None => model.init_params::<F>(tc.seed)?,
                Some(path) => {
                    let ck: Checkpoint<F> =
                        load_checkpoint(path, Some(&model)).with_context(|| format!("loading {}", path.display()))?;
                    ck.require_tokenizer(&hash)?;
                    ck.params
                }
            };
            let opt = OptimizerState::new(&params);
            (params, opt, TrainProgress::start())
        }
    };
    write_atomic(&args.out.join("config.toml"), cfg.to_toml()?.as_bytes())?;

    let curve_path = args.out.join("curve.csv");
    let val_path = args.out.join("val.csv");
    let mut curve_rows = kept_rows(&curve_path, 1, progress.epochs_done)?;
    let mut val_rows = kept_rows(&val_path, 0, progress.epochs_done)?;
    let mut epochs_this_run = 0usize;
    let report = train(&mut params, &mut optimizer, progress, &train_items, &val_items, &model, &tc, tok.special(), &mut |e| {
        let ck = Checkpoint {
            model: model.clone(),
            tokenizer_hash: hash.clone(),
            params: e.params.clone(),
            optimizer: Some(e.optimizer.snapshot()),
            meta: serde_json::to_value(TrainMeta {
                stage: args.stage,
                progress: e.progress.clone(),
                train: tc.clone(),
            })
            .expect("meta serializes"),
        };
        save_checkpoint(&ck, &epoch_checkpoint(&args.out, e.epoch))?;
        curve_rows.extend(e.curve.iter().map(curve_csv_row));
        let text: String = std::iter::once(curve_csv_header()).chain(curve_rows.iter().map(String::as_str)).collect();
        write_atomic(&curve_path, text.as_bytes())?;
        if let Some(v) = e.val_loss {
            val_rows.push(format!("{},{v}\n", e.epoch));
            let text: String = std::iter::once("epoch,val_loss\n").chain(val_rows.iter().map(String::as_str)).collect();
            write_atomic(&val_path, text.as_bytes())?;
        }
        if e.is_best {
            let best = Checkpoint { optimizer: None, ..ck };
            save_checkpoint(&best, &args.out.join("best.ckpt"))?;
            let marker = serde_json::json!({ "epoch": e.epoch, "val_loss": e.val_loss });
            write_atomic(&args.out.join("best.json"), format!("{marker}\n").as_bytes())?;
        }
        let last = e.curve.last().map_or(f64::NAN, |c| c.loss);
        eprintln!(
            "epoch {}: {} updates, last loss {last:.4}{}",
            e.epoch,
            e.progress.updates_done,
            e.val_loss.map_or(String::new(), |v| format!(", val {v:.4}{}", if e.is_best { " (best)" } else { "" }))
        );
        epochs_this_run += 1;
        if args.halt_after.is_some_and(|h| epochs_this_run >= h) && !e.progress.finished {
            return Err(endoreport::Error::Interrupted);
        }
        Ok(())
    });
    let report = match report {
        Err(endoreport::Error::Interrupted) => {
            eprintln!("halted after {epochs_this_run} epochs; rerun with --resume to continue");
            return Ok(());
        }
        r => r?,
    };

    // The selected model: best validation epoch when tracked, else the last.
    let best_path = args.out.join("best.ckpt");
    let selected = if tc.select_best_val && best_path.exists() {
        fs::read(&best_path)?
    } else {
        Checkpoint {
            model: model.clone(),
            tokenizer_hash: hash.clone(),
            params,
            optimizer: None,
            meta: serde_json::to_value(TrainMeta {
                stage: args.stage,
                progress: report.progress.clone(),
                train: tc.clone(),
            })?,
        }
        .to_bytes()
    };
    write_atomic(&args.out.join("model.ckpt"), &selected)?;
    eprintln!(
        "finished: {} updates{}; model written to {}",
        report.progress.updates_done,
        if report.stopped_early { " (target loss reached)" } else { "" },
        args.out.join("model.ckpt").display()
    );
    Ok(())
}
