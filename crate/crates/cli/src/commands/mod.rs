//! One module per subcommand.

pub mod bench;
pub mod evaluate;
pub mod localize;
pub mod retrieve;
pub mod simulate;

use std::path::{Path, PathBuf};

/// Dataset-relative path of the virtual database index (text).
pub fn virtual_index_path(dataset: &Path) -> PathBuf {
    dataset.join("virtual_index.txt")
}

/// Dataset-relative path of the virtual database descriptors (binary).
pub fn virtual_blob_path(dataset: &Path) -> PathBuf {
    dataset.join("virtual_descriptors.bin")
}

/// Dataset-relative path of the real-frame descriptors (binary).
pub fn descriptors_path(dataset: &Path) -> PathBuf {
    dataset.join("descriptors.bin")
}

/// Default per-frame record file for an estimate: `frames.jsonl` in the
/// estimate's directory, as written by `localize`.
pub fn localize_counts_sibling(est: &Path) -> PathBuf {
    est.parent().unwrap_or_else(|| Path::new(".")).join("frames.jsonl")
}
