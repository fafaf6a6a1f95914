//! Flat `key = value` config files for training runs.
//!
//! Keys mirror the train configuration one-to-one, with encoder settings
//! under an `encoder.` prefix:
//!
//! ```text
//! # sweep point: tighter sampling, bigger batch
//! rho = 0.25
//! batch_size = 16
//! encoder.dim = 64
//! ```
//!
//! `#` starts a comment, blank lines are skipped, later lines win over
//! earlier ones, and unknown keys are rejected. Values given as command-line
//! flags override values from the file.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use rice_core::trainer::TrainConfig;
use rice_core::{Error, Result};

/// Applies every assignment in the file on top of `config`.
pub fn apply_config_file(path: &Path, config: &mut TrainConfig) -> Result<()> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("config file {}: {e}", path.display())))?;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!(
                "config file {} line {}: expected `key = value`, got {raw:?}",
                path.display(),
                idx + 1
            ))
        })?;
        set_key(config, key.trim(), value.trim()).map_err(|msg| {
            Error::config(format!(
                "config file {} line {}: {msg}",
                path.display(),
                idx + 1
            ))
        })?;
    }
    Ok(())
}

fn set_key(config: &mut TrainConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    match key {
        "regions_per_image" => config.regions_per_image = parse(key, value)?,
        "object_classes" => config.object_classes = parse(key, value)?,
        "ocr_vocab" => config.ocr_vocab = parse(key, value)?,
        "rho" => config.rho = parse(key, value)?,
        "margin" => config.margin = parse(key, value)?,
        "scale" => config.scale = parse(key, value)?,
        "lr" => config.lr = parse(key, value)?,
        "weight_decay" => config.weight_decay = parse(key, value)?,
        "batch_size" => config.batch_size = parse(key, value)?,
        "steps" => config.steps = parse(key, value)?,
        "seed" => config.seed = parse(key, value)?,
        "lambda_ocr" => config.lambda_ocr = parse(key, value)?,
        "shards" => config.shards = parse(key, value)?,
        "per_region_negatives" => config.per_region_negatives = parse(key, value)?,
        "encoder.layers" => config.encoder.layers = parse(key, value)?,
        "encoder.region_layers" => config.encoder.region_layers = parse(key, value)?,
        "encoder.heads" => config.encoder.heads = parse(key, value)?,
        "encoder.dim" => config.encoder.dim = parse(key, value)?,
        "encoder.patch" => config.encoder.patch = parse(key, value)?,
        "encoder.channels" => config.encoder.channels = parse(key, value)?,
        "encoder.image_h" => config.encoder.image_h = parse(key, value)?,
        "encoder.image_w" => config.encoder.image_w = parse(key, value)?,
        other => return Err(format!("unknown config key {other:?}")),
    }
    Ok(())
}

fn parse<T>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T: FromStr,
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| format!("key {key:?}: cannot parse {value:?}: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_config(content: &str) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        file.write_all(content.as_bytes()).unwrap();
        file
    }

    #[test]
    fn every_documented_key_is_applied() {
        let file = write_config(
            "regions_per_image = 3\n\
             object_classes = 9\n\
             ocr_vocab = 7\n\
             rho = 0.5\n\
             margin = 0.25\n\
             scale = 32\n\
             lr = 0.01\n\
             weight_decay = 0.1\n\
             batch_size = 4\n\
             steps = 11\n\
             seed = 42\n\
             lambda_ocr = 0.75\n\
             shards = 2\n\
             per_region_negatives = true\n\
             encoder.layers = 4\n\
             encoder.region_layers = 1\n\
             encoder.heads = 2\n\
             encoder.dim = 16\n\
             encoder.patch = 4\n\
             encoder.channels = 3\n\
             encoder.image_h = 16\n\
             encoder.image_w = 16\n",
        );
        let mut config = TrainConfig::default();
        apply_config_file(file.path(), &mut config).unwrap();
        assert_eq!(config.regions_per_image, 3);
        assert_eq!(config.object_classes, 9);
        assert_eq!(config.ocr_vocab, 7);
        assert_eq!(config.rho, 0.5);
        assert_eq!(config.margin, 0.25);
        assert_eq!(config.scale, 32.0);
        assert_eq!(config.lr, 0.01);
        assert_eq!(config.weight_decay, 0.1);
        assert_eq!(config.batch_size, 4);
        assert_eq!(config.steps, 11);
        assert_eq!(config.seed, 42);
        assert_eq!(config.lambda_ocr, 0.75);
        assert_eq!(config.shards, 2);
        assert!(config.per_region_negatives);
        assert_eq!(config.encoder.layers, 4);
        assert_eq!(config.encoder.region_layers, 1);
        assert_eq!(config.encoder.heads, 2);
        assert_eq!(config.encoder.dim, 16);
        assert_eq!(config.encoder.patch, 4);
        assert_eq!(config.encoder.channels, 3);
        assert_eq!(config.encoder.image_h, 16);
        assert_eq!(config.encoder.image_w, 16);
        config.validate().unwrap();
    }

    #[test]
    fn comments_blanks_and_spacing_are_tolerated() {
        let file = write_config("# a sweep point\n\n  steps=7   # keep it short\n");
        let mut config = TrainConfig::default();
        apply_config_file(file.path(), &mut config).unwrap();
        assert_eq!(config.steps, 7);
    }

    #[test]
    fn later_assignments_win() {
        let file = write_config("steps = 1\nsteps = 9\n");
        let mut config = TrainConfig::default();
        apply_config_file(file.path(), &mut config).unwrap();
        assert_eq!(config.steps, 9);
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_line_number() {
        let file = write_config("steps = 3\nlearning_rate = 0.1\n");
        let mut config = TrainConfig::default();
        let err = apply_config_file(file.path(), &mut config)
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn malformed_lines_and_values_are_rejected() {
        let mut config = TrainConfig::default();
        let no_equals = write_config("steps\n");
        assert!(apply_config_file(no_equals.path(), &mut config).is_err());
        let bad_value = write_config("steps = soon\n");
        assert!(apply_config_file(bad_value.path(), &mut config).is_err());
    }

    #[test]
    fn a_missing_file_is_a_config_error() {
        let mut config = TrainConfig::default();
        let err = apply_config_file(Path::new("/does/not/exist.conf"), &mut config).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
