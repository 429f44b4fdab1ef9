use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestPair {
    pub clip_id: String,
    pub scene_id: String,
    /// Indices into the scene's region list.
    pub gt_region_indices: Vec<usize>,
}

/// Clip/scene pairs of one split. Scenes live in `scenes/<id>.ply` with a
/// `.json` sidecar and clips in `clips/<id>.egsc` (raw) or `clips/<id>.egsf`
/// (features), both relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub split: Split,
    pub affordance_catalog: BTreeMap<usize, String>,
    pub pairs: Vec<ManifestPair>,
    #[serde(skip)]
    pub root: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipFormat {
    Raw,
    Features,
}

impl ClipFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ClipFormat::Raw => "egsc",
            ClipFormat::Features => "egsf",
        }
    }
}

impl DatasetManifest {
    pub fn new(split: Split, affordance_catalog: BTreeMap<usize, String>, pairs: Vec<ManifestPair>) -> Self {
        Self { version: MANIFEST_VERSION, split, affordance_catalog, pairs, root: PathBuf::new() }
    }

    pub fn scene_path(&self, scene_id: &str) -> PathBuf {
        self.root.join("scenes").join(format!("{scene_id}.ply"))
    }

    pub fn clip_path(&self, clip_id: &str, format: ClipFormat) -> PathBuf {
        self.root.join("clips").join(format!("{clip_id}.{}", format.extension()))
    }

    /// Every referenced file exists, in either clip format.
    pub fn check_files(&self) -> Result<()> {
        for p in &self.pairs {
            let scene = self.scene_path(&p.scene_id);
            for f in [scene.clone(), scene.with_extension("json")] {
                if !f.is_file() {
                    return Err(Error::MissingFile(f));
                }
            }
            let raw = self.clip_path(&p.clip_id, ClipFormat::Raw);
            if !raw.is_file() && !self.clip_path(&p.clip_id, ClipFormat::Features).is_file() {
                return Err(Error::MissingFile(raw));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })?;
    let mut m: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::VersionMismatch {
            what: path.display().to_string(),
            detail: format!("manifest version {} (expected {MANIFEST_VERSION})", m.version),
        });
    }
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    m.check_files()?;
    Ok(m)
}
