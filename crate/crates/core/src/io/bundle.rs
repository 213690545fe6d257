//! Serialized model checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::GenerativeModel;
use crate::transition::AdaptReport;

/// Bumped whenever the bundle layout changes.
pub const BUNDLE_FORMAT: u32 = 1;
const BUNDLE_MAGIC: &[u8; 4] = b"UGTB";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BundleStage {
    Source,
    Transitional,
    Finetuned,
}

impl BundleStage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Source => "source",
            Self::Transitional => "transitional",
            Self::Finetuned => "finetuned",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: BundleStage,
    /// SHA-256 of the canonical JSON of the configuration used.
    pub config_hash: String,
    /// SHA-256 of the manifest file the model was trained from.
    pub manifest_hash: String,
    pub seed: u64,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format: u32,
    pub model: GenerativeModel,
    pub adapt_report: Option<AdaptReport>,
    pub provenance: Provenance,
}

impl ModelBundle {
    pub fn new(
        model: GenerativeModel,
        adapt_report: Option<AdaptReport>,
        provenance: Provenance,
    ) -> Self {
        Self {
            format: BUNDLE_FORMAT,
            model,
            adapt_report,
            provenance,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = BUNDLE_MAGIC.to_vec();
        bincode::serialize_into(&mut out, self)
            .map_err(|e| Error::Format(format!("bundle encoding: {e}")))?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != BUNDLE_MAGIC {
            return Err(Error::Format("not a model bundle".into()));
        }
        let b: ModelBundle = bincode::deserialize(&bytes[4..])
            .map_err(|e| Error::Format(format!("bundle decoding: {e}")))?;
        if b.format != BUNDLE_FORMAT {
            return Err(Error::Format(format!(
                "unsupported bundle format {}",
                b.format
            )));
        }
        b.model.validate()?;
        Ok(b)
    }

    /// SHA-256 of the serialized bundle.
    pub fn hash(&self) -> Result<String> {
        Ok(super::sha256_hex(&self.to_bytes()?))
    }
}

pub fn save_bundle(path: &Path, bundle: &ModelBundle) -> Result<()> {
    super::write_atomic(path, &bundle.to_bytes()?)
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let bytes = super::read_bytes(path)?;
    ModelBundle::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
