//! The `endoreport` command line.

pub mod commands;
pub mod config;
pub mod data;
pub mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use endoreport::model::Stage;
use endoreport::storage::manifest::Split;

use commands::evaluate::EvaluateArgs;
use commands::generate::GenerateArgs;
use commands::train::TrainArgs;
use config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DType {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML file overlaying the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Replaces the corpus seed and both training seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = DType::F32)]
    pub dtype: DType,
}

#[derive(Debug, Parser)]
#[command(name = "endoreport", version, about = "Endoscopy findings-report generation on a synthetic corpus")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    let n: u8 = s.parse().map_err(|_| format!("stage must be 1 or 2, got `{s}`"))?;
    Stage::try_from(n).map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus: images, manifests, tokenizer.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train stage 1 (captions) or stage 2 (findings).
    Train {
        /// Corpus directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
        /// `fresh`, or a checkpoint to start from.
        #[arg(long, default_value = "fresh")]
        init: String,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest epoch checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs of this invocation.
        #[arg(long, hide = true)]
        halt_after: Option<usize>,
    },
    /// Greedy generation for every record of a manifest.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_parser = parse_stage, default_value = "2")]
        stage: Stage,
        /// Defaults to `tokenizer.txt` beside the manifest.
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-token attention heatmaps.
        #[arg(long)]
        attn: bool,
    },
    /// Score a reports file; with `--baseline`, also the relative change.
    Evaluate {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a self-check suite.
    Verify {
        #[arg(long, value_enum)]
        suite: verify::Suite,
        /// Plant a known defect; the suite must then fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
        /// Also write the report here as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn with_dtype<T>(dtype: DType, f32_run: impl FnOnce() -> Result<T>, f64_run: impl FnOnce() -> Result<T>) -> Result<T> {
    match dtype {
        DType::F32 => f32_run(),
        DType::F64 => f64_run(),
    }
}

/// Runs a parsed command. `Ok(false)` means a verification suite failed.
pub fn execute(cli: &Cli) -> Result<bool> {
    let common = &cli.common;
    if common.threads == 0 {
        bail!("--threads must be at least 1");
    }
    // A second call in one process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(common.threads).build_global();
    let cfg = RunConfig::load(common.config.as_deref())?.with_seed(common.seed);
    match &cli.command {
        Command::Synth { out } => commands::synth::run(&cfg, out)?,
        Command::Train {
            data,
            stage,
            init,
            out,
            resume,
            halt_after,
        } => {
            let args = TrainArgs {
                data: data.clone(),
                stage: *stage,
                init: (init != "fresh").then(|| PathBuf::from(init)),
                out: out.clone(),
                resume: *resume,
                halt_after: *halt_after,
            };
            with_dtype(
                common.dtype,
                || commands::train::run::<f32>(&cfg, &args),
                || commands::train::run::<f64>(&cfg, &args),
            )?
        }
        Command::Generate {
            ckpt,
            manifest,
            stage,
            tokenizer,
            split,
            out,
            attn,
        } => {
            let args = GenerateArgs {
                ckpt: ckpt.clone(),
                manifest: manifest.clone(),
                stage: *stage,
                tokenizer: tokenizer.clone(),
                split: split.split(),
                out: out.clone(),
                attn: *attn,
            };
            with_dtype(
                common.dtype,
                || commands::generate::run::<f32>(&cfg, &args),
                || commands::generate::run::<f64>(&cfg, &args),
            )?
        }
        Command::Evaluate { pairs, baseline, out } => commands::evaluate::run(&EvaluateArgs {
            pairs: pairs.clone(),
            baseline: baseline.clone(),
            out: out.clone(),
        })?,
        Command::Verify { suite, inject_fault, out } => {
            let checks = verify::run_suite(*suite, *inject_fault)?;
            for c in &checks {
                eprintln!("{c}");
            }
            if let Some(path) = out {
                std::fs::create_dir_all(path.parent().unwrap_or(std::path::Path::new(".")))?;
                endoreport::storage::write_atomic(path, (serde_json::to_string_pretty(&checks)? + "\n").as_bytes())?;
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

/// Exit codes: 0 success, 1 runtime or data error (or a failed suite),
/// 2 usage error.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("verification failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
