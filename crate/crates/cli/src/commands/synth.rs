//! `rice synth` — deterministic blob-dataset generation.

use std::path::PathBuf;

use clap::Args;
use rice_core::features::write_features_file;
use rice_core::manifest::write_manifest_file;
use rice_core::synth::{synth_generate, SynthConfig};
use serde_json::json;

use super::{guard_overwrite, resolve, FEATURES_FILE, MANIFEST_FILE};
use crate::{CmdResult, Format, Globals};

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Latent class count G (at least 2).
    #[arg(long, default_value_t = SynthConfig::default().classes)]
    pub classes: usize,

    /// Number of images.
    #[arg(long, default_value_t = SynthConfig::default().images)]
    pub images: usize,

    /// Regions per image.
    #[arg(long, default_value_t = SynthConfig::default().regions_per_image)]
    pub regions_per_image: usize,

    /// Image height in pixels.
    #[arg(long, default_value_t = SynthConfig::default().image_h)]
    pub image_h: usize,

    /// Image width in pixels.
    #[arg(long, default_value_t = SynthConfig::default().image_w)]
    pub image_w: usize,

    /// Per-region feature dimension D.
    #[arg(long, default_value_t = SynthConfig::default().feature_dim)]
    pub feature_dim: usize,

    /// Gaussian spread of features around their class mean.
    #[arg(long, default_value_t = SynthConfig::default().feature_noise)]
    pub feature_noise: f64,

    /// Manifest output [default: <data-dir>/manifest.jsonl].
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,

    /// Feature-file output [default: <data-dir>/features.bin].
    #[arg(long, value_name = "PATH")]
    pub features: Option<PathBuf>,
}

pub fn run(args: &SynthArgs, globals: &Globals) -> CmdResult {
    let config = SynthConfig {
        classes: args.classes,
        images: args.images,
        regions_per_image: args.regions_per_image,
        image_h: args.image_h,
        image_w: args.image_w,
        feature_dim: args.feature_dim,
        feature_noise: args.feature_noise,
    };
    let seed = globals.effective_seed()?;
    let manifest_path = resolve(&globals.data_dir, MANIFEST_FILE, args.manifest.as_ref());
    let features_path = resolve(&globals.data_dir, FEATURES_FILE, args.features.as_ref());
    guard_overwrite(&manifest_path, globals.force)?;
    guard_overwrite(&features_path, globals.force)?;

    let output = synth_generate(&config, seed)?;
    write_manifest_file(&manifest_path, &output.records)?;
    write_features_file(&features_path, &output.features)?;

    let regions: usize = output.records.iter().map(|r| r.regions.len()).sum();
    match globals.format {
        Format::Text => {
            println!(
                "wrote {} records ({} regions) to {}",
                output.records.len(),
                regions,
                manifest_path.display()
            );
            println!(
                "wrote {}x{} features to {}",
                output.features.nrows(),
                output.features.ncols(),
                features_path.display()
            );
        }
        Format::Json => println!(
            "{}",
            json!({
                "records": output.records.len(),
                "regions": regions,
                "feature_dim": output.features.ncols(),
                "manifest": manifest_path,
                "features": features_path,
            })
        ),
    }
    Ok(())
}
