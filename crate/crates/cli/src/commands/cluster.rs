//! `rice cluster` — centroid fitting and manifest pseudo-labeling.
//!
//! Reads the per-region feature file, fits K centers (optionally through a
//! coarse-then-fine two-level pass), writes the centroid table, and emits a
//! copy of the manifest whose object regions carry their nearest-centroid
//! pseudo-label. When the input manifest already has labels — synthetic
//! generator truth, or a previous labeling — the command reports the purity
//! of the fresh assignment against them.

use std::collections::HashMap;
use std::path::PathBuf;

use clap::Args;
use rice_core::cluster::{assign_all, kmeans_fit, write_centroids_file};
use rice_core::manifest::{read_manifest_file, write_manifest_file};
use rice_core::features::read_features_file;
use rice_core::region::RegionKind;
use rice_core::Error;
use serde_json::json;

use super::{
    guard_overwrite, resolve, CENTROIDS_FILE, FEATURES_FILE, LABELED_MANIFEST_FILE, MANIFEST_FILE,
};
use crate::{CmdResult, Format, Globals};

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// Centroid count K.
    #[arg(long, default_value_t = 16)]
    pub k: usize,

    /// Lloyd iterations per fit.
    #[arg(long, default_value_t = 25)]
    pub iters: usize,

    /// Two-level fit: first fit this many coarse centers, then fine centers
    /// inside each coarse bucket (assignment stays exact).
    #[arg(long, value_name = "K1")]
    pub coarse: Option<usize>,

    /// Feature file [default: <data-dir>/features.bin].
    #[arg(long, value_name = "PATH")]
    pub features: Option<PathBuf>,

    /// Manifest to pseudo-label [default: <data-dir>/manifest.jsonl].
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,

    /// Centroid-table output [default: <data-dir>/centroids.bin].
    #[arg(long, value_name = "PATH")]
    pub centroids: Option<PathBuf>,

    /// Labeled-manifest output [default: <data-dir>/manifest.labeled.jsonl].
    #[arg(long, value_name = "PATH")]
    pub labeled_manifest: Option<PathBuf>,
}

/// Majority-vote agreement between cluster assignments and prior labels.
fn purity(pairs: &[(usize, usize)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let mut per_cluster: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
    for &(cluster, label) in pairs {
        *per_cluster.entry(cluster).or_default().entry(label).or_insert(0) += 1;
    }
    let majority: usize = per_cluster
        .values()
        .map(|counts| counts.values().copied().max().unwrap_or(0))
        .sum();
    Some(majority as f64 / pairs.len() as f64)
}

pub fn run(args: &ClusterArgs, globals: &Globals) -> CmdResult {
    let features_path = resolve(&globals.data_dir, FEATURES_FILE, args.features.as_ref());
    let manifest_path = resolve(&globals.data_dir, MANIFEST_FILE, args.manifest.as_ref());
    let centroids_path = resolve(&globals.data_dir, CENTROIDS_FILE, args.centroids.as_ref());
    let labeled_path = resolve(
        &globals.data_dir,
        LABELED_MANIFEST_FILE,
        args.labeled_manifest.as_ref(),
    );
    guard_overwrite(&centroids_path, globals.force)?;
    guard_overwrite(&labeled_path, globals.force)?;

    let features = read_features_file(&features_path).map_err(|e| match e {
        Error::Io(io) => Error::config(format!(
            "feature file {}: {io}",
            features_path.display()
        )),
        other => other,
    })?;
    let mut records = read_manifest_file(&manifest_path)?;
    let total_regions: usize = records.iter().map(|r| r.regions.len()).sum();
    if features.nrows() != total_regions {
        return Err(Error::validation(format!(
            "feature file has {} rows but the manifest lists {} regions",
            features.nrows(),
            total_regions
        ))
        .into());
    }

    let seed = globals.effective_seed()?;
    let (table, stats) = kmeans_fit(&features, args.k, args.coarse, args.iters, seed)?;
    let (assignments, _) = assign_all(&features, &table)?;

    // Purity against whatever labels the manifest carried before this run.
    let mut pairs = Vec::new();
    let mut row = 0usize;
    for record in &records {
        for region in &record.regions {
            if let Some(label) = region.object_label {
                pairs.push((assignments[row], label));
            }
            row += 1;
        }
    }
    let purity = purity(&pairs);

    // Pseudo-label the object regions in traversal order; OCR regions keep
    // their token supervision.
    let mut row = 0usize;
    for record in &mut records {
        for region in &mut record.regions {
            if region.kind == RegionKind::Object {
                region.object_label = Some(assignments[row]);
            }
            row += 1;
        }
    }

    write_centroids_file(&centroids_path, &table)?;
    write_manifest_file(&labeled_path, &records)?;

    let inertia = stats.final_inertia();
    match globals.format {
        Format::Text => {
            println!(
                "fitted {} centers to {} features in {} iterations; final inertia {inertia:.6}",
                table.k(),
                features.nrows(),
                args.iters
            );
            match purity {
                Some(p) => println!(
                    "purity vs existing labels: {p:.4} ({} labeled regions)",
                    pairs.len()
                ),
                None => println!("purity vs existing labels: n/a (no labeled regions)"),
            }
            println!("wrote centroids to {}", centroids_path.display());
            println!("wrote labeled manifest to {}", labeled_path.display());
        }
        Format::Json => println!(
            "{}",
            json!({
                "requested_k": args.k,
                "k": table.k(),
                "points": features.nrows(),
                "iters": args.iters,
                "inertia": inertia,
                "purity": purity,
                "labeled_regions": pairs.len(),
                "centroids": centroids_path,
                "labeled_manifest": labeled_path,
            })
        ),
    }
    Ok(())
}
