use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_bytes, write_bytes};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Reference,
    Query,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub mask_path: PathBuf,
    pub feature_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_index: Option<i64>,
}

/// JSON dataset description. Relative paths resolve against the directory
/// holding the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub reference_entries: Vec<ManifestEntry>,
    pub query_entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn entries(&self, split: Split) -> &[ManifestEntry] {
        match split {
            Split::Reference => &self.reference_entries,
            Split::Query => &self.query_entries,
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn entry(&self, split: Split, image_id: &str) -> Option<&ManifestEntry> {
        self.entries(split).iter().find(|e| e.image_id == image_id)
    }

    /// Unique ids per split; with `check_paths`, every referenced file exists.
    pub fn validate(&self, check_paths: bool) -> Result<()> {
        for split in [Split::Reference, Split::Query] {
            let mut seen = HashSet::new();
            for e in self.entries(split) {
                if !seen.insert(e.image_id.as_str()) {
                    return Err(Error::Manifest(format!(
                        "duplicate image_id {:?} in {split:?} split",
                        e.image_id
                    )));
                }
                if check_paths {
                    for p in [&e.mask_path, &e.feature_path] {
                        let full = self.resolve(p);
                        if !full.is_file() {
                            return Err(Error::Manifest(format!(
                                "{}: missing file {}",
                                e.image_id,
                                full.display()
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let mut m: DatasetManifest = serde_json::from_slice(&read_bytes(path)?)?;
    m.base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    m.validate(true)?;
    Ok(m)
}

pub fn save_manifest(path: impl AsRef<Path>, m: &DatasetManifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(m)?;
    bytes.push(b'\n');
    write_bytes(path.as_ref(), &bytes)
}
