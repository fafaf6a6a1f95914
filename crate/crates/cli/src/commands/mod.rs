//! Subcommand implementations and the path plumbing they share.

pub mod check;
pub mod cluster;
pub mod inspect;
pub mod synth;
pub mod train;

use std::path::{Path, PathBuf};

use crate::CliError;

pub(crate) const MANIFEST_FILE: &str = "manifest.jsonl";
pub(crate) const FEATURES_FILE: &str = "features.bin";
pub(crate) const CENTROIDS_FILE: &str = "centroids.bin";
pub(crate) const LABELED_MANIFEST_FILE: &str = "manifest.labeled.jsonl";
pub(crate) const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub(crate) const METRICS_FILE: &str = "metrics.jsonl";

/// An explicit path wins; otherwise the default file name under the data
/// root.
pub(crate) fn resolve(data_dir: &Path, default_name: &str, explicit: Option<&PathBuf>) -> PathBuf {
    explicit
        .cloned()
        .unwrap_or_else(|| data_dir.join(default_name))
}

/// Refuses to clobber an existing file unless `--force` was given.
pub(crate) fn guard_overwrite(path: &Path, force: bool) -> std::result::Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Overwrite(path.to_path_buf()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn explicit_paths_bypass_the_data_dir() {
        let dir = Path::new("/data");
        assert_eq!(
            resolve(dir, MANIFEST_FILE, None),
            PathBuf::from("/data/manifest.jsonl")
        );
        let explicit = PathBuf::from("elsewhere/m.jsonl");
        assert_eq!(
            resolve(dir, MANIFEST_FILE, Some(&explicit)),
            PathBuf::from("elsewhere/m.jsonl")
        );
    }

    #[test]
    fn overwrite_guard_respects_force() {
        let file = tempfile::NamedTempFile::new().unwrap();
        assert!(matches!(
            guard_overwrite(file.path(), false),
            Err(CliError::Overwrite(_))
        ));
        assert!(guard_overwrite(file.path(), true).is_ok());
        assert!(guard_overwrite(Path::new("/absent/file"), false).is_ok());
    }
}
