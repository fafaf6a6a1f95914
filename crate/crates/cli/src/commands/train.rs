//! `rice train` — run the region encoder against the margin classifier.
//!
//! Images are re-rendered deterministically from the manifest records, so a
//! manifest (plus the configuration) fully determines a run. The metrics
//! stream gets one JSON line per step; the final state lands in a
//! checkpoint. `--resume` continues the step/seed sequence from a saved
//! checkpoint, and a non-finite loss aborts with exit code 3 after flushing
//! the metrics written so far.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::Args;
use rice_core::checkpoint::{load_checkpoint_file, save_checkpoint_file};
use rice_core::manifest::read_manifest_file;
use rice_core::region::ImageRecord;
use rice_core::synth::render_record;
use rice_core::trainer::{train_step, StepMetrics, TrainConfig, TrainState};
use rice_core::Error;
use serde_json::json;

use super::{guard_overwrite, resolve, CHECKPOINT_FILE, MANIFEST_FILE, METRICS_FILE};
use crate::{config, CmdResult, Format, Globals};

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Steps to run in this invocation.
    #[arg(long)]
    pub steps: Option<usize>,

    /// Regions sampled per image (N).
    #[arg(long)]
    pub regions_per_image: Option<usize>,

    /// Object pseudo-class count (K).
    #[arg(long)]
    pub object_classes: Option<usize>,

    /// OCR token vocabulary size.
    #[arg(long)]
    pub ocr_vocab: Option<usize>,

    /// Negative sampling ratio in (0, 1].
    #[arg(long)]
    pub rho: Option<f64>,

    /// Additive cosine margin m in [0, 1).
    #[arg(long)]
    pub margin: Option<f64>,

    /// Logit scale s.
    #[arg(long)]
    pub scale: Option<f64>,

    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,

    /// Decoupled weight decay.
    #[arg(long)]
    pub weight_decay: Option<f64>,

    /// Images per step.
    #[arg(long)]
    pub batch_size: Option<usize>,

    /// Weight of the OCR loss in the mixed objective.
    #[arg(long)]
    pub lambda_ocr: Option<f64>,

    /// Simulated classifier shard count W.
    #[arg(long)]
    pub shards: Option<usize>,

    /// Draw fresh negatives per region instead of one shared draw per image
    /// and kind.
    #[arg(long, value_name = "BOOL")]
    pub per_region_negatives: Option<bool>,

    /// Manifest to train on [default: <data-dir>/manifest.jsonl].
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,

    /// Checkpoint output [default: <data-dir>/checkpoint.bin].
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,

    /// Metrics-stream output [default: <data-dir>/metrics.jsonl].
    #[arg(long, value_name = "PATH")]
    pub metrics: Option<PathBuf>,

    /// Resume from this checkpoint instead of a fresh initialization.
    #[arg(long, value_name = "PATH")]
    pub resume: Option<PathBuf>,
}

/// Config precedence: defaults, then the config file, then explicit flags.
fn effective_config(args: &TrainArgs, globals: &Globals) -> Result<TrainConfig, Error> {
    let mut config = TrainConfig::default();
    if let Some(path) = &globals.config {
        config::apply_config_file(path, &mut config)?;
    }
    macro_rules! apply {
        ($($field:ident),*) => {
            $(if let Some(value) = args.$field {
                config.$field = value;
            })*
        };
    }
    apply!(
        steps,
        regions_per_image,
        object_classes,
        ocr_vocab,
        rho,
        margin,
        scale,
        lr,
        weight_decay,
        batch_size,
        lambda_ocr,
        shards,
        per_region_negatives
    );
    if let Some(seed) = globals.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

pub fn run(args: &TrainArgs, globals: &Globals) -> CmdResult {
    let config = effective_config(args, globals)?;
    let manifest_path = resolve(&globals.data_dir, MANIFEST_FILE, args.manifest.as_ref());
    let checkpoint_path = resolve(&globals.data_dir, CHECKPOINT_FILE, args.checkpoint.as_ref());
    let metrics_path = resolve(&globals.data_dir, METRICS_FILE, args.metrics.as_ref());
    guard_overwrite(&checkpoint_path, globals.force)?;
    guard_overwrite(&metrics_path, globals.force)?;

    let records = read_manifest_file(&manifest_path)?;
    if records.is_empty() {
        return Err(Error::validation(format!(
            "manifest {} has no records",
            manifest_path.display()
        ))
        .into());
    }

    let mut state = match &args.resume {
        Some(path) => TrainState::from_checkpoint(load_checkpoint_file(path)?, &config)?,
        None => TrainState::init(&config)?,
    };
    let start_step = state.step;

    let palette = config.object_classes;
    let provider = move |record: &ImageRecord| render_record::<f32>(record, palette);

    if let Some(parent) = metrics_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut metrics_file = BufWriter::new(File::create(&metrics_path)?);
    let mut first: Option<StepMetrics> = None;
    let mut last: Option<StepMetrics> = None;
    for _ in 0..config.steps {
        let metrics = train_step(&mut state, &records, &provider, &config)?;
        writeln!(metrics_file, "{}", metrics.to_json_line())?;
        if !metrics.is_finite() {
            metrics_file.flush()?;
            return Err(Error::numeric(format!(
                "non-finite loss at step {}; aborting (metrics flushed to {})",
                metrics.step,
                metrics_path.display()
            ))
            .into());
        }
        first.get_or_insert_with(|| metrics.clone());
        last = Some(metrics);
    }
    metrics_file.flush()?;
    save_checkpoint_file(&checkpoint_path, &state.to_checkpoint(&config))?;

    match globals.format {
        Format::Text => {
            match (&first, &last) {
                (Some(first), Some(last)) => {
                    println!(
                        "ran {} steps ({}..={}): object_loss {:.6} -> {:.6}, ocr_loss {:.6} -> {:.6}",
                        config.steps,
                        first.step,
                        last.step,
                        first.object_loss,
                        last.object_loss,
                        first.ocr_loss,
                        last.ocr_loss
                    );
                }
                _ => println!("ran 0 steps; checkpoint holds the state at step {start_step}"),
            }
            println!("wrote metrics to {}", metrics_path.display());
            println!("wrote checkpoint to {}", checkpoint_path.display());
        }
        Format::Json => println!(
            "{}",
            json!({
                "steps_run": config.steps,
                "start_step": start_step,
                "end_step": state.step,
                "first": first,
                "final": last,
                "metrics": metrics_path,
                "checkpoint": checkpoint_path,
            })
        ),
    }
    Ok(())
}
