//! Parameter checkpoints: a raw little-endian f32 blob plus a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{APAUNet, APAUNetConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

const FORMAT: &str = "apaseg-params/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: APAUNetConfig,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub numel: usize,
    pub sha256: String,
    pub tensors: Vec<TensorEntry>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `tensors` in order as little-endian f32 to `path`; returns the
/// entries and the hex SHA-256 of the blob.
pub fn save_tensors<'a, T: Real>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<(Vec<TensorEntry>, String)> {
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, t) in tensors {
        for v in t.data() {
            bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
        entries.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset });
        offset += t.numel();
    }
    fs::write(path, &bytes)?;
    Ok((entries, hex::encode(Sha256::digest(&bytes))))
}

/// Reads a blob written by [`save_tensors`], checking size and checksum.
pub fn load_tensors<T: Real>(path: &Path, entries: &[TensorEntry], sha256: &str) -> Result<Vec<Tensor<T>>> {
    let bytes = fs::read(path)?;
    let want: usize = entries.iter().map(|e| e.shape.iter().product::<usize>()).sum::<usize>() * 4;
    if bytes.len() != want {
        return Err(Error::Format {
            offset: bytes.len().min(want) as u64,
            msg: format!("{}: blob has {} bytes, manifest describes {want}", path.display(), bytes.len()),
        });
    }
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != sha256 {
        return Err(Error::Format { offset: 0, msg: format!("{}: checksum mismatch", path.display()) });
    }
    entries
        .iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let data = bytes[e.offset * 4..(e.offset + n) * 4]
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            Tensor::new(&e.shape, data)
        })
        .collect()
}

/// Saves the parameters to `path` (manifest) and `path` with a `.bin` extension (blob).
pub fn save_checkpoint<T: Real>(path: &Path, config: &APAUNetConfig, store: &ParamStore<T>) -> Result<Manifest> {
    let blob = blob_path(path);
    let (tensors, sha256) = save_tensors(&blob, store.iter().map(|p| (p.name.as_str(), &p.value)))?;
    let manifest = Manifest {
        format: FORMAT.to_string(),
        config: config.clone(),
        blob: blob.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        numel: store.numel(),
        sha256,
        tensors,
    };
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Rebuilds the network from the manifest's config and loads its parameters.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(APAUNet, ParamStore<T>, Manifest)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if manifest.format != FORMAT {
        return Err(Error::Format { offset: 0, msg: format!("unknown checkpoint format {:?}", manifest.format) });
    }
    let (net, mut store) = APAUNet::build::<T>(&manifest.config)?;
    let blob = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let values = load_tensors::<T>(&blob, &manifest.tensors, &manifest.sha256)?;
    if values.len() != store.len() {
        return Err(Error::Invalid(format!(
            "checkpoint has {} tensors, network has {}",
            values.len(),
            store.len()
        )));
    }
    for ((p, v), e) in store.iter_mut().zip(values).zip(&manifest.tensors) {
        if p.name != e.name || p.value.shape() != v.shape() {
            return Err(Error::Invalid(format!(
                "checkpoint tensor {} {:?} does not match parameter {} {:?}",
                e.name,
                v.shape(),
                p.name,
                p.value.shape()
            )));
        }
        p.value = v;
    }
    Ok((net, store, manifest))
}
