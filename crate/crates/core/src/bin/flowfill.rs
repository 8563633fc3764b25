//! `flowfill`: dataset generation, two-stage training, evaluation, and
//! figure rendering for turbulent-field completion, driven by one TOML
//! config.
//!
//! Conventions shared by every subcommand:
//! - `--out` is a directory created (or overwritten file-by-file) by the
//!   command; inputs are never modified.
//! - Each successful run writes `run_manifest.json` into the output
//!   directory: the argv, a full config snapshot, and SHA-256 checksums of
//!   all inputs and outputs. Two runs of the same command differ only in
//!   the manifest's timestamp.
//! - `FLOWFILL_OUT_ROOT` re-roots relative `--out` paths;
//!   `FLOWFILL_THREADS` sets evaluation worker threads. No other
//!   environment variable is read.

use clap::{Parser, Subcommand};
use flowfill::config::PipelineConfig;
use flowfill::dataset::{generate_dataset, read_dataset, Dataset};
use flowfill::error::{Error, Result};
use flowfill::evaluation::{evaluate, import_baseline, read_report, write_report, BaselineSet};
use flowfill::plot::render_report;
use flowfill::training::{train_stage1, train_stage2};
use flowfill::vqvae::load_checkpoint;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const MANIFEST_NAME: &str = "run_manifest.json";
const LOG_NAME: &str = "train_log.jsonl";
const OUT_ROOT_VAR: &str = "FLOWFILL_OUT_ROOT";
const THREADS_VAR: &str = "FLOWFILL_THREADS";

#[derive(Parser)]
#[command(
    name = "flowfill",
    version,
    about = "Kolmogorov-flow completion pipeline: simulate, train, evaluate, plot",
    after_help = "Environment:\n  \
        FLOWFILL_OUT_ROOT  Root directory prepended to relative --out paths.\n  \
        FLOWFILL_THREADS   Worker threads for evaluation (default 1)."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the flow ensemble and write the dataset container.
    Generate {
        /// Pipeline config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the dataset container.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the reconstruction model from scratch (stage 1).
    TrainStage1 {
        /// Pipeline config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory produced by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the stage-1 checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a stage-1 checkpoint for masked completion (stage 2).
    TrainStage2 {
        /// Pipeline config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Stage-1 checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Mask name from the config's [masks] section.
        #[arg(long)]
        mask: String,
        /// Dataset directory produced by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the stage-2 checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a stage-2 checkpoint (and optional baselines) on the test split.
    Evaluate {
        /// Pipeline config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Stage-2 checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory produced by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Mask name from the config's [masks] section.
        #[arg(long)]
        mask: String,
        /// External completions to score alongside the model, as
        /// NAME=DIR of a baseline container. Repeatable.
        #[arg(long = "baseline", value_name = "NAME=DIR")]
        baselines: Vec<String>,
        /// Output directory for the report container.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the figures for an evaluation report.
    Plot {
        /// Report directory produced by `evaluate`.
        #[arg(long)]
        report: PathBuf,
        /// Output directory for PNG figures.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the canonical default configuration as TOML.
    PrintConfig,
}

fn main() -> ExitCode {
    // Clap handles usage errors itself (exit code 2).
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Display strings already carry their source chain.
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Generate { config, out } => cmd_generate(&config, &resolve_out(out)),
        Cmd::TrainStage1 { config, data, out } => {
            cmd_train_stage1(&config, &data, &resolve_out(out))
        }
        Cmd::TrainStage2 {
            config,
            ckpt,
            mask,
            data,
            out,
        } => cmd_train_stage2(&config, &ckpt, &mask, &data, &resolve_out(out)),
        Cmd::Evaluate {
            config,
            ckpt,
            data,
            mask,
            baselines,
            out,
        } => cmd_evaluate(&config, &ckpt, &data, &mask, &baselines, &resolve_out(out)),
        Cmd::Plot { report, out } => cmd_plot(&report, &resolve_out(out)),
        Cmd::PrintConfig => {
            print!("{}", PipelineConfig::default().to_canonical_toml());
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// Environment.
// ---------------------------------------------------------------------------

/// Re-root a relative `--out` under `FLOWFILL_OUT_ROOT` if it is set.
/// Absolute paths are taken as given.
fn resolve_out(out: PathBuf) -> PathBuf {
    if out.is_absolute() {
        return out;
    }
    match std::env::var_os(OUT_ROOT_VAR) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(out),
        _ => out,
    }
}

fn env_threads() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(Error::Config(format!("{THREADS_VAR}: {e}"))),
        Ok(s) => match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "{THREADS_VAR} must be a positive integer, got '{s}'"
            ))),
        },
    }
}

// ---------------------------------------------------------------------------
// Run manifests.
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ArtifactRef {
    path: String,
    sha256: String,
}

/// What gets written as `run_manifest.json`. With the config snapshot and
/// argv, the producing command can be re-run exactly; the checksums pin what
/// it read and wrote. `timestamp_unix` is the only field that may differ
/// between two runs of the same command.
#[derive(Serialize)]
struct Manifest<'a> {
    command: &'static str,
    argv: Vec<String>,
    status: &'a str,
    timestamp_unix: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a PipelineConfig>,
    inputs: BTreeMap<String, ArtifactRef>,
    outputs: BTreeMap<String, ArtifactRef>,
}

fn artifact(path: &Path) -> Result<ArtifactRef> {
    Ok(ArtifactRef {
        path: path.display().to_string(),
        sha256: hash_path(path)?,
    })
}

/// SHA-256 of a file, or of a directory's contents (file names and bytes,
/// sorted, recursively). `run_manifest.json` entries are skipped so an
/// output directory hashes the same before and after the manifest lands in
/// it, and across re-runs.
fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    hash_into(&mut h, path, "")?;
    Ok(hex::encode(h.finalize()))
}

fn hash_into(h: &mut Sha256, path: &Path, rel: &str) -> Result<()> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_dir() {
        let mut entries: Vec<(String, PathBuf)> = Vec::new();
        for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
            let entry = entry.map_err(|e| Error::io(path, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name == MANIFEST_NAME {
                continue;
            }
            entries.push((name, entry.path()));
        }
        entries.sort();
        for (name, child) in entries {
            let child_rel = if rel.is_empty() {
                name
            } else {
                format!("{rel}/{name}")
            };
            hash_into(h, &child, &child_rel)?;
        }
    } else {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        h.update(rel.as_bytes());
        h.update([0u8]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(())
}

fn write_manifest(out_dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = out_dir.join(MANIFEST_NAME);
    let mut text = serde_json::to_string_pretty(manifest)
        .expect("manifest serializes to JSON");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn argv_tail() -> Vec<String> {
    std::env::args().skip(1).collect()
}

fn create_out_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

// ---------------------------------------------------------------------------
// Subcommands.
// ---------------------------------------------------------------------------

fn cmd_generate(config_path: &Path, out: &Path) -> Result<()> {
    let cfg = PipelineConfig::load(config_path)?;
    let ds = generate_dataset(&cfg.dataset_spec())?;
    create_out_dir(out)?;
    flowfill::dataset::write_dataset(&ds, out)?;

    let mut inputs = BTreeMap::new();
    inputs.insert("config".to_string(), artifact(config_path)?);
    let mut outputs = BTreeMap::new();
    outputs.insert("dataset".to_string(), artifact(out)?);
    write_manifest(
        out,
        &Manifest {
            command: "generate",
            argv: argv_tail(),
            status: "ok",
            timestamp_unix: now_unix(),
            config: Some(&cfg),
            inputs,
            outputs,
        },
    )?;
    eprintln!(
        "generate: wrote {} frames ({}x{}) to {}",
        ds.num_frames(),
        ds.grid(),
        ds.grid(),
        out.display()
    );
    Ok(())
}

/// Shared tail of both training commands: run the stage closure with a log
/// file open in the output directory, then write the manifest. An
/// instability abort still writes the manifest (the saved last-good
/// checkpoint is a real output) before the error propagates.
fn run_training(
    command: &'static str,
    cfg: &PipelineConfig,
    inputs: BTreeMap<String, ArtifactRef>,
    out: &Path,
    train: impl FnOnce(&mut dyn std::io::Write) -> Result<()>,
) -> Result<()> {
    create_out_dir(out)?;
    let log_path = out.join(LOG_NAME);
    let mut log = std::io::BufWriter::new(
        fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?,
    );
    let result = train(&mut log);
    std::io::Write::flush(&mut log).map_err(|e| Error::io(&log_path, e))?;
    drop(log);

    let status = match &result {
        Ok(()) => "ok",
        // The abort saved a last-good checkpoint, so record the run.
        Err(Error::Instability { .. }) => "aborted-instability",
        // Any other failure left no artifacts worth a manifest.
        Err(_) => return result,
    };
    let mut outputs = BTreeMap::new();
    outputs.insert("checkpoint".to_string(), artifact(out)?);
    outputs.insert("train_log".to_string(), artifact(&log_path)?);
    write_manifest(
        out,
        &Manifest {
            command,
            argv: argv_tail(),
            status,
            timestamp_unix: now_unix(),
            config: Some(cfg),
            inputs,
            outputs,
        },
    )?;
    result
}

fn cmd_train_stage1(config_path: &Path, data: &Path, out: &Path) -> Result<()> {
    let cfg = PipelineConfig::load(config_path)?;
    let ds = read_dataset(data)?;
    let tc = cfg.train_config(1);

    let mut inputs = BTreeMap::new();
    inputs.insert("config".to_string(), artifact(config_path)?);
    inputs.insert("dataset".to_string(), artifact(data)?);

    let arch = cfg.model.clone();
    let steps = tc.steps;
    run_training("train-stage1", &cfg, inputs, out, move |log| {
        train_stage1(&ds, arch, &tc, out, log).map(|_| ())
    })?;
    eprintln!(
        "train-stage1: {steps} steps done, checkpoint at {}",
        out.display()
    );
    Ok(())
}

fn cmd_train_stage2(
    config_path: &Path,
    ckpt: &Path,
    mask_name: &str,
    data: &Path,
    out: &Path,
) -> Result<()> {
    let cfg = PipelineConfig::load(config_path)?;
    let mask = cfg.mask(mask_name)?.clone();
    let ds = read_dataset(data)?;
    let (stage1, _steps) = load_checkpoint(ckpt)?;
    let tc = cfg.train_config(2);

    let mut inputs = BTreeMap::new();
    inputs.insert("config".to_string(), artifact(config_path)?);
    inputs.insert("dataset".to_string(), artifact(data)?);
    inputs.insert("stage1_checkpoint".to_string(), artifact(ckpt)?);

    let steps = tc.steps;
    run_training("train-stage2", &cfg, inputs, out, move |log| {
        train_stage2(stage1, &ds, mask, &tc, out, log).map(|_| ())
    })?;
    eprintln!(
        "train-stage2: {steps} steps done (mask '{mask_name}'), checkpoint at {}",
        out.display()
    );
    Ok(())
}

fn parse_baseline_arg(arg: &str) -> Result<(&str, &Path)> {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name, Path::new(path)))
        }
        _ => Err(Error::Config(format!(
            "--baseline takes NAME=DIR, got '{arg}'"
        ))),
    }
}

fn cmd_evaluate(
    config_path: &Path,
    ckpt: &Path,
    data: &Path,
    mask_name: &str,
    baseline_args: &[String],
    out: &Path,
) -> Result<()> {
    let cfg = PipelineConfig::load(config_path)?;
    let mask = cfg.mask(mask_name)?.clone();
    let ds: Dataset = read_dataset(data)?;
    let (model, _steps) = load_checkpoint(ckpt)?;

    let mut inputs = BTreeMap::new();
    inputs.insert("config".to_string(), artifact(config_path)?);
    inputs.insert("dataset".to_string(), artifact(data)?);
    inputs.insert("checkpoint".to_string(), artifact(ckpt)?);
    let mut baselines: Vec<BaselineSet> = Vec::new();
    for arg in baseline_args {
        let (name, dir) = parse_baseline_arg(arg)?;
        baselines.push(import_baseline(dir, name, &ds)?);
        inputs.insert(format!("baseline:{name}"), artifact(dir)?);
    }

    let mut opts = cfg.evaluation.clone();
    opts.threads = env_threads()?;
    let report = evaluate(&model, &ds, &mask, &baselines, &opts)?;
    create_out_dir(out)?;
    write_report(&report, out)?;

    let mut outputs = BTreeMap::new();
    outputs.insert("report".to_string(), artifact(out)?);
    write_manifest(
        out,
        &Manifest {
            command: "evaluate",
            argv: argv_tail(),
            status: "ok",
            timestamp_unix: now_unix(),
            config: Some(&cfg),
            inputs,
            outputs,
        },
    )?;
    for (name, m) in &report.models {
        eprintln!(
            "evaluate: {name}: rel L2 {:.4} +- {:.4} over {} test frames",
            m.rel_l2_mean,
            m.rel_l2_std,
            report.test_frames.len()
        );
    }
    Ok(())
}

fn cmd_plot(report_dir: &Path, out: &Path) -> Result<()> {
    let report = read_report(report_dir)?;
    create_out_dir(out)?;
    let files = render_report(&report, out)?;

    let mut inputs = BTreeMap::new();
    inputs.insert("report".to_string(), artifact(report_dir)?);
    let mut outputs = BTreeMap::new();
    for f in &files {
        let name = f
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        outputs.insert(name, artifact(f)?);
    }
    write_manifest(
        out,
        &Manifest {
            command: "plot",
            argv: argv_tail(),
            status: "ok",
            timestamp_unix: now_unix(),
            config: None,
            inputs,
            outputs,
        },
    )?;
    eprintln!("plot: wrote {} figures to {}", files.len(), out.display());
    Ok(())
}
