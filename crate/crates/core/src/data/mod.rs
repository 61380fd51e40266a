//! Volume records, the on-disk container, preprocessing, phantom synthesis
//! and patch sampling.

mod preprocess;
mod sampler;
mod synth;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use preprocess::{preprocess, resample};
pub use sampler::{flip_patch, random_flip, Patch, PatchSampler, PatchSpec};
pub use synth::{synthesize_case, ClassIntensity, SyntheticSpec};

pub const IMAGE_DTYPE: &str = "f32le";
pub const LABEL_DTYPE: &str = "u8";

/// A 3D image with its label mask, both `(H, W, D)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeRecord {
    pub case_id: String,
    pub shape: [usize; 3],
    /// Millimetres per voxel along (H, W, D).
    pub spacing: [f64; 3],
    pub image: Vec<f32>,
    pub label: Vec<u8>,
    /// Fraction of voxels labelled tumour, recorded by the phantom generator.
    pub tumour_fraction: Option<f64>,
}

impl VolumeRecord {
    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        let n = self.voxels();
        if n == 0 || self.image.len() != n || self.label.len() != n {
            return Err(Error::Invalid(format!(
                "{}: shape {:?} does not match {} image / {} label voxels",
                self.case_id,
                self.shape,
                self.image.len(),
                self.label.len()
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Invalid(format!("{}: spacing {:?} must be positive", self.case_id, self.spacing)));
        }
        if let Some(c) = num_classes {
            if let Some(&bad) = self.label.iter().find(|&&l| l as usize >= c) {
                return Err(Error::Invalid(format!("{}: label {bad} outside [0, {c})", self.case_id)));
            }
        }
        Ok(())
    }

    pub fn foreground_voxels(&self) -> usize {
        self.label.iter().filter(|&&l| l > 0).count()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    case_id: String,
    shape: [usize; 3],
    spacing: [f64; 3],
    image_dtype: String,
    label_dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tumour_fraction: Option<f64>,
}

/// Serializes to the container layout: a JSON header line, `\n`, the image
/// as little-endian f32, then the labels as u8.
pub fn encode_volume(rec: &VolumeRecord) -> Result<Vec<u8>> {
    rec.validate(None)?;
    let header = Header {
        case_id: rec.case_id.clone(),
        shape: rec.shape,
        spacing: rec.spacing,
        image_dtype: IMAGE_DTYPE.into(),
        label_dtype: LABEL_DTYPE.into(),
        tumour_fraction: rec.tumour_fraction,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(rec.voxels() * 5);
    for v in &rec.image {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&rec.label);
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<VolumeRecord> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format { offset: bytes.len() as u64, msg: "missing header line".into() })?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Format { offset: e.column() as u64, msg: format!("bad header: {e}") })?;
    if header.image_dtype != IMAGE_DTYPE {
        return Err(Error::Format { offset: 0, msg: format!("unknown image dtype {:?}", header.image_dtype) });
    }
    if header.label_dtype != LABEL_DTYPE {
        return Err(Error::Format { offset: 0, msg: format!("unknown label dtype {:?}", header.label_dtype) });
    }
    let n: usize = header.shape.iter().product();
    let start = nl + 1;
    let want = n * 5;
    let payload = &bytes[start..];
    if payload.len() != want {
        let kind = if payload.len() < want { "truncated payload" } else { "trailing bytes after payload" };
        return Err(Error::Format {
            offset: (start + payload.len().min(want)) as u64,
            msg: format!("{kind}: {} bytes, header implies {want}", payload.len()),
        });
    }
    let image = payload[..4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let label = payload[4 * n..].to_vec();
    let rec = VolumeRecord {
        case_id: header.case_id,
        shape: header.shape,
        spacing: header.spacing,
        image,
        label,
        tumour_fraction: header.tumour_fraction,
    };
    rec.validate(None).map_err(|e| Error::Format { offset: 0, msg: e.to_string() })?;
    Ok(rec)
}

pub fn save_volume(path: &Path, rec: &VolumeRecord) -> Result<()> {
    let bytes = encode_volume(rec)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<VolumeRecord> {
    decode_volume(&fs::read(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub case_id: String,
    /// Relative to the index file.
    pub path: String,
    pub split: Split,
}

/// Dataset index file: case paths plus split assignment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub cases: Vec<IndexEntry>,
}

pub const INDEX_FILE: &str = "dataset.json";

impl DatasetIndex {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(INDEX_FILE))?)?)
    }

    pub fn paths(&self, dir: &Path, split: Option<Split>) -> Vec<PathBuf> {
        self.cases
            .iter()
            .filter(|c| split.is_none_or(|s| c.split == s))
            .map(|c| dir.join(&c.path))
            .collect()
    }

    /// Loads every case of `split` (or all cases).
    pub fn load_cases(&self, dir: &Path, split: Option<Split>) -> Result<Vec<VolumeRecord>> {
        self.paths(dir, split).iter().map(|p| load_volume(p)).collect()
    }
}

/// Loads the cases listed in `dir`'s index, or every `*.vol` file in name
/// order when there is no index.
pub fn load_dir(dir: &Path, split: Option<Split>) -> Result<Vec<VolumeRecord>> {
    if dir.join(INDEX_FILE).exists() {
        return DatasetIndex::load(dir)?.load_cases(dir, split);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "vol"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_volume(p)).collect()
}
