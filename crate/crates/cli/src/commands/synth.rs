use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use endoreport::storage::write_atomic;
use endoreport::synth::generate_corpus;

use crate::config::RunConfig;

pub fn run(cfg: &RunConfig, out: &PathBuf) -> Result<()> {
    let corpus = generate_corpus(&cfg.corpus)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_atomic(&out.join("config.toml"), cfg.to_toml()?.as_bytes())
        .with_context(|| format!("writing to {}", out.display()))?;
    corpus.write(out).with_context(|| format!("writing corpus to {}", out.display()))?;
    let s = corpus.summary();
    eprintln!("{:<12} {:>8} {:>8} {:>8}", "", "train", "val", "test");
    eprintln!("{:<12} {:>8} {:>8} {:>8}", "patients", s.patients[0], s.patients[1], s.patients[2]);
    eprintln!("{:<12} {:>8} {:>8} {:>8}", "procedures", s.procedures[0], s.procedures[1], s.procedures[2]);
    eprintln!("{:<12} {:>8} {:>8} {:>8}", "images", s.images[0], s.images[1], s.images[2]);
    eprintln!("vocabulary {}; corpus written to {}", s.vocab_size, out.display());
    Ok(())
}
