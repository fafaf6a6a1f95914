//! `rice inspect` — summarize a checkpoint on sample images.
//!
//! Re-renders the first `--samples` manifest records, encodes them with the
//! checkpoint's parameters, and reports the pairwise patch-token distance
//! histogram with its mean, the mean distance between patch tokens of
//! different region labels (the separation signal training should raise),
//! and the nearest-centroid accuracy of the region embeddings against the
//! manifest labels.

use std::path::PathBuf;

use clap::Args;
use ndarray::Array2;
use rice_core::checkpoint::load_checkpoint_file;
use rice_core::encoder::encode;
use rice_core::linalg::l2_normalize;
use rice_core::manifest::read_manifest_file;
use rice_core::synth::render_record;
use rice_core::trainer::{
    cross_class_token_distance, nearest_center_accuracy, token_distance_histogram,
};
use rice_core::Error;
use serde_json::json;

use super::{resolve, CHECKPOINT_FILE, MANIFEST_FILE};
use crate::{CmdResult, Format, Globals};

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Checkpoint to inspect [default: <data-dir>/checkpoint.bin].
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,

    /// Manifest supplying the sample images [default: <data-dir>/manifest.jsonl].
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,

    /// Number of manifest records to encode.
    #[arg(long, default_value_t = 32)]
    pub samples: usize,

    /// Histogram bin count over the distance range [0, 2].
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
}

pub fn run(args: &InspectArgs, globals: &Globals) -> CmdResult {
    if args.samples == 0 {
        return Err(Error::config("need at least one sample image").into());
    }
    let checkpoint_path = resolve(&globals.data_dir, CHECKPOINT_FILE, args.checkpoint.as_ref());
    let manifest_path = resolve(&globals.data_dir, MANIFEST_FILE, args.manifest.as_ref());

    let ckpt = load_checkpoint_file(&checkpoint_path).map_err(|e| match e {
        Error::Io(io) => Error::config(format!(
            "checkpoint {}: {io}",
            checkpoint_path.display()
        )),
        other => other,
    })?;
    let records = read_manifest_file(&manifest_path)?;
    if records.is_empty() {
        return Err(Error::validation(format!(
            "manifest {} has no records",
            manifest_path.display()
        ))
        .into());
    }
    let take = args.samples.min(records.len());
    let palette = ckpt.classifier.object_classes();

    let mut counts = vec![0usize; args.bins];
    let mut pair_total = 0usize;
    let mut distance_sum = 0.0f64;
    let mut cross_sum = 0.0f64;
    let mut cross_images = 0usize;
    let mut embedding_rows: Vec<Vec<f32>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();

    for record in &records[..take] {
        let pixels = render_record::<f32>(record, palette)?;
        let (tokens, regions) = encode(&pixels, &record.regions, &ckpt.params, &ckpt.encoder_config)?;

        let histogram = token_distance_histogram(&tokens, args.bins)?;
        for (total, fresh) in counts.iter_mut().zip(&histogram.counts) {
            *total += fresh;
        }
        distance_sum += histogram.mean * histogram.total_pairs as f64;
        pair_total += histogram.total_pairs;

        match cross_class_token_distance(&tokens, &record.regions) {
            Ok(distance) => {
                cross_sum += distance;
                cross_images += 1;
            }
            // An image without two distinctly-labeled regions has no
            // cross-class pairs; it still contributes to the histogram.
            Err(Error::Validation(_)) => {}
            Err(e) => return Err(e.into()),
        }

        for (i, region) in record.regions.iter().enumerate() {
            if let Some(label) = region.object_label {
                let (unit, _) = l2_normalize(regions.values.row(i))?;
                embedding_rows.push(unit.to_vec());
                labels.push(label);
            }
        }
    }

    let mean_distance = distance_sum / pair_total as f64;
    let cross_distance = (cross_images > 0).then(|| cross_sum / cross_images as f64);
    let accuracy = if labels.is_empty() {
        None
    } else {
        let dim = embedding_rows[0].len();
        let mut embeddings = Array2::<f32>::zeros((embedding_rows.len(), dim));
        for (mut row, values) in embeddings.outer_iter_mut().zip(&embedding_rows) {
            for (slot, &v) in row.iter_mut().zip(values) {
                *slot = v;
            }
        }
        Some(nearest_center_accuracy(&embeddings, &labels, &ckpt.classifier)?)
    };

    match globals.format {
        Format::Text => {
            println!(
                "checkpoint at step {}: dim {}, {} layers ({} region), {} object classes, {} ocr tokens",
                ckpt.trainer_step,
                ckpt.encoder_config.dim,
                ckpt.encoder_config.layers,
                ckpt.encoder_config.region_layers,
                ckpt.classifier.object_classes(),
                ckpt.classifier.ocr_classes()
            );
            println!(
                "token distance histogram over {take} images ({} bins spanning [0, 2]):",
                args.bins
            );
            let width = 2.0 / args.bins as f64;
            for (i, count) in counts.iter().enumerate() {
                println!(
                    "  [{:.2}, {:.2}) {count:>8}",
                    i as f64 * width,
                    (i + 1) as f64 * width
                );
            }
            println!("mean token distance: {mean_distance:.4} ({pair_total} pairs)");
            match cross_distance {
                Some(d) => println!("cross-class token distance: {d:.4} ({cross_images} images)"),
                None => println!("cross-class token distance: n/a (no multi-label images)"),
            }
            match accuracy {
                Some(a) => println!(
                    "nearest-centroid region accuracy: {a:.4} ({} regions)",
                    labels.len()
                ),
                None => println!("nearest-centroid region accuracy: n/a (no labeled regions)"),
            }
        }
        Format::Json => println!(
            "{}",
            json!({
                "trainer_step": ckpt.trainer_step,
                "images": take,
                "bins": counts,
                "bin_width": 2.0 / args.bins as f64,
                "mean_token_distance": mean_distance,
                "total_pairs": pair_total,
                "cross_class_distance": cross_distance,
                "cross_class_images": cross_images,
                "accuracy": accuracy,
                "regions": labels.len(),
            })
        ),
    }
    Ok(())
}
