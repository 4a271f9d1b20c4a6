use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use endoreport::metrics::{ablation_table, evaluate_corpus, MetricReport};
use endoreport::storage::write_atomic;

use super::generate::read_reports;

pub struct EvaluateArgs {
    pub pairs: PathBuf,
    /// Second reports file; enables the relative-change table `(a − b) / b`.
    pub baseline: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn score_file(path: &std::path::Path) -> Result<MetricReport> {
    let recs = read_reports(path)?;
    let pairs: Vec<(&str, &str)> = recs.iter().map(|r| (r.generated.as_str(), r.reference.as_str())).collect();
    Ok(evaluate_corpus(&pairs)?)
}

pub fn run(args: &EvaluateArgs) -> Result<()> {
    let a = score_file(&args.pairs)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_atomic(&args.out.join("metrics.csv"), a.to_csv().as_bytes())?;
    write_atomic(&args.out.join("metrics.txt"), a.to_table().as_bytes())?;
    write_atomic(&args.out.join("metrics.json"), (serde_json::to_string_pretty(&a)? + "\n").as_bytes())?;
    eprint!("{}", a.to_table());
    if a.counts.meteor_inexact > 0 {
        eprintln!("note: {} METEOR alignments hit the search budget", a.counts.meteor_inexact);
    }
    if let Some(b_path) = &args.baseline {
        let b = score_file(b_path)?;
        write_atomic(&args.out.join("baseline.csv"), b.to_csv().as_bytes())?;
        let (csv, table) = ablation_table(&a, &b);
        write_atomic(&args.out.join("ablation.csv"), csv.as_bytes())?;
        write_atomic(&args.out.join("ablation.txt"), table.as_bytes())?;
        eprint!("{table}");
    }
    Ok(())
}
