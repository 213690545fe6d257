//! JSON dataset manifests listing feature-map tensors with labels, domain
//! tags and occlusion levels.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationKind};
use crate::synth::OcclusionLevel;
use crate::vmf::FeatureMap;

pub const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Tensor path, relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub label: Option<u32>,
    pub domain: Domain,
    pub occlusion: Option<OcclusionLevel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: u32,
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative entry paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(dim: usize, height: usize, width: usize, entries: Vec<ManifestEntry>) -> Self {
        Self {
            schema: MANIFEST_SCHEMA,
            dim,
            height,
            width,
            entries,
            base_dir: PathBuf::new(),
        }
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    pub fn entries_in(&self, domain: Domain) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.domain == domain)
    }

    /// Reads the feature map of one entry.
    pub fn load_map(&self, entry: &ManifestEntry) -> Result<FeatureMap> {
        let path = self.resolve(entry);
        let fm = super::read_tensor(&path)?.to_feature_map()?;
        if fm.dim() != self.dim || fm.height() != self.height || fm.width() != self.width {
            return Err(Error::validation(
                ValidationKind::DimMismatch,
                format!("{} does not match the manifest dims", path.display()),
            ));
        }
        Ok(fm)
    }

    /// Reads the maps (and labels) of every entry in `domain`, in manifest order.
    pub fn load_domain(&self, domain: Domain) -> Result<(Vec<FeatureMap>, Vec<Option<u32>>)> {
        let entries: Vec<&ManifestEntry> = self.entries_in(domain).collect();
        let maps = entries
            .iter()
            .map(|e| self.load_map(e))
            .collect::<Result<_>>()?;
        Ok((maps, entries.iter().map(|e| e.label).collect()))
    }
}

/// Parses a manifest and checks its schema version. Relative entry paths
/// resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let bytes = super::read_bytes(path)?;
    let mut m: DatasetManifest = serde_json::from_slice(&bytes).map_err(|e| {
        Error::validation(ValidationKind::Schema, format!("{}: {e}", path.display()))
    })?;
    if m.schema != MANIFEST_SCHEMA {
        return Err(Error::validation(
            ValidationKind::Schema,
            format!(
                "unsupported manifest schema {} (expected {MANIFEST_SCHEMA})",
                m.schema
            ),
        ));
    }
    m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(m)
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    super::write_json(path, manifest)
}

/// Checks every entry: the file exists, its header matches the global
/// H×W×D, and source entries carry labels. Reports the first problem.
pub fn validate_manifest(manifest: &DatasetManifest) -> Result<()> {
    if manifest.schema != MANIFEST_SCHEMA {
        return Err(Error::validation(
            ValidationKind::Schema,
            format!("unsupported manifest schema {}", manifest.schema),
        ));
    }
    if manifest.dim == 0 || manifest.height == 0 || manifest.width == 0 {
        return Err(Error::validation(
            ValidationKind::Schema,
            "manifest dims must be positive",
        ));
    }
    let expected = [manifest.height, manifest.width, manifest.dim];
    for (i, entry) in manifest.entries.iter().enumerate() {
        let path = manifest.resolve(entry);
        if !path.is_file() {
            return Err(Error::validation(
                ValidationKind::MissingFile,
                format!("entry {i}: {} does not exist", path.display()),
            ));
        }
        let dims = super::read_tensor_dims(&path)?;
        if dims != expected {
            return Err(Error::validation(
                ValidationKind::DimMismatch,
                format!(
                    "entry {i}: {} has dims {dims:?}, manifest says {expected:?}",
                    path.display()
                ),
            ));
        }
        if entry.domain == Domain::Source && entry.label.is_none() {
            return Err(Error::validation(
                ValidationKind::MissingLabel,
                format!("entry {i}: source entry {} has no label", path.display()),
            ));
        }
    }
    Ok(())
}
