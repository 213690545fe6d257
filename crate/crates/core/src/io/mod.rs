//! On-disk formats: tensors, dataset manifests and model bundles.

mod bundle;
mod manifest;
mod tensor;

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use bundle::{load_bundle, save_bundle, BundleStage, ModelBundle, Provenance, BUNDLE_FORMAT};
pub use manifest::{
    load_manifest, save_manifest, validate_manifest, DatasetManifest, Domain, ManifestEntry,
    MANIFEST_SCHEMA,
};
pub use tensor::{
    decode_tensor, encode_tensor, read_tensor, read_tensor_dims, write_tensor, Tensor,
    UNIT_READ_TOL,
};

/// Writes `bytes` to a temporary sibling and renames it over `path`, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Lower-case hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// SHA-256 of a file's contents.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

/// Reads a JSON document.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes a pretty-printed JSON document atomically.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Converts a `.npy` array (float32 or float64) into a TensorFile.
pub fn convert_npy(input: &Path, output: &Path) -> Result<Tensor> {
    let bytes = read_bytes(input)?;
    let npy = npyz::NpyFile::new(&bytes[..])
        .map_err(|e| Error::Format(format!("{}: {e}", input.display())))?;
    if npy.order() != npyz::Order::C {
        return Err(Error::Format("only C-order arrays are supported".into()));
    }
    let dims: Vec<usize> = npy.shape().iter().map(|&d| d as usize).collect();
    let type_str = npy.dtype().descr();
    let data: Vec<f32> = match type_str.as_str() {
        "'<f4'" | "<f4" => npy.into_vec::<f32>(),
        "'<f8'" | "<f8" => npy
            .into_vec::<f64>()
            .map(|v| v.into_iter().map(|x| x as f32).collect()),
        other => return Err(Error::Format(format!("unsupported npy dtype {other}"))),
    }
    .map_err(|e| Error::Format(format!("{}: {e}", input.display())))?;
    let tensor = Tensor::new(dims, data)?;
    write_tensor(output, &tensor)?;
    Ok(tensor)
}
