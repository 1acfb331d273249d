//! Volume container, on-disk format, intensity normalization, dataset
//! manifests and splits.
//!
//! The container format ("RV01") is a single UTF-8 JSON header line followed
//! by a raw little-endian payload in C order, axes (C, X, Y, Z) with Z
//! fastest. Image volumes use dtype `f32`; masks use dtype `u8` with a
//! leading channel axis of 1.

mod synth;

pub use synth::{generate_synthetic_dataset, SynthConfig};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

pub const NORM_EPS: f64 = 1e-8;

// === in-memory types ===

#[derive(Debug, Clone, PartialEq)]
pub struct Volume<F> {
    /// (C, X, Y, Z)
    pub data: Array4<F>,
    /// Physical voxel spacing (sx, sy, sz).
    pub spacing: [f64; 3],
    /// One name per channel.
    pub modalities: Vec<String>,
}

impl<F: Scalar> Volume<F> {
    pub fn new(data: Array4<F>, spacing: [f64; 3], modalities: Vec<String>) -> Result<Self> {
        if modalities.len() != data.shape()[0] {
            return Err(Error::shape(
                "volume modalities",
                format!("{} names", data.shape()[0]),
                format!("{} names", modalities.len()),
            ));
        }
        Ok(Volume {
            data,
            spacing,
            modalities,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn spatial_dims(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[1], s[2], s[3])
    }
}

/// A volume plus whatever supervision the dataset carries.
#[derive(Debug, Clone)]
pub struct LabeledVolume<F> {
    pub volume: Volume<F>,
    pub class_label: Option<usize>,
    /// Per-voxel class ids over (X, Y, Z).
    pub mask: Option<Array3<u8>>,
}

// === intensity normalization ===

/// Per-channel shift-and-scale into [-1, 1]: subtract the channel mean, then
/// divide by the maximum absolute deviation (plus a small epsilon, so a
/// constant channel maps to all zeros).
pub fn normalize_intensity<F: Scalar>(data: &mut Array4<F>) {
    let c = data.shape()[0];
    for ch in 0..c {
        let mut channel = data.index_axis_mut(ndarray::Axis(0), ch);
        let n = channel.len() as f64;
        let mean = channel.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let mean_f = F::from_f64(mean);
        channel.mapv_inplace(|v| v - mean_f);
        let max_abs = channel
            .iter()
            .fold(F::zero(), |acc, v| acc.max(v.abs()))
            .as_f64();
        let scale = F::from_f64(1.0 / (max_abs + NORM_EPS));
        channel.mapv_inplace(|v| v * scale);
    }
}

// === RV01 container I/O ===

#[derive(Debug, Serialize, Deserialize)]
struct Rv01Header {
    magic: String,
    dtype: String,
    shape: Vec<usize>,
    spacing: Vec<f64>,
    modalities: Vec<String>,
}

fn read_header(path: &Path, reader: &mut impl BufRead) -> Result<Rv01Header> {
    let mut line = String::new();
    reader
        .read_line(&mut line)
        .map_err(|e| Error::io(path, e))?;
    let header: Rv01Header = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::format(path, format!("header parse: {e}")))?;
    if header.magic != "RV01" {
        return Err(Error::format(
            path,
            format!("bad magic {:?}, expected \"RV01\"", header.magic),
        ));
    }
    if header.shape.len() != 4 {
        return Err(Error::format(
            path,
            format!("shape must have 4 axes (C,X,Y,Z), got {:?}", header.shape),
        ));
    }
    if header.spacing.len() != 3 {
        return Err(Error::format(
            path,
            format!("spacing must have 3 entries, got {:?}", header.spacing),
        ));
    }
    Ok(header)
}

fn read_payload(path: &Path, reader: &mut impl Read, nbytes: usize) -> Result<Vec<u8>> {
    let mut payload = vec![0u8; nbytes];
    reader
        .read_exact(&mut payload)
        .map_err(|e| Error::format(path, format!("payload truncated: {e}")))?;
    let mut rest = Vec::new();
    reader
        .read_to_end(&mut rest)
        .map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after payload", rest.len()),
        ));
    }
    Ok(payload)
}

pub fn save_volume<F: Scalar>(path: impl AsRef<Path>, vol: &Volume<F>) -> Result<()> {
    let path = path.as_ref();
    let header = Rv01Header {
        magic: "RV01".into(),
        dtype: "f32".into(),
        shape: vol.data.shape().to_vec(),
        spacing: vol.spacing.to_vec(),
        modalities: vol.modalities.clone(),
    };
    let mut bytes = serde_json::to_string(&header)
        .map_err(|e| Error::format(path, format!("serialize header: {e}")))?
        .into_bytes();
    bytes.push(b'\n');
    bytes.reserve(vol.data.len() * 4);
    let data = vol.data.as_standard_layout();
    for v in data.iter() {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_volume<F: Scalar>(path: impl AsRef<Path>) -> Result<Volume<F>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let header = read_header(path, &mut reader)?;
    if header.dtype != "f32" {
        return Err(Error::format(
            path,
            format!("dtype {:?}, expected \"f32\" for volumes", header.dtype),
        ));
    }
    let count: usize = header.shape.iter().product();
    let payload = read_payload(path, &mut reader, count * 4)?;
    let values: Vec<F> = payload
        .chunks_exact(4)
        .map(|b| F::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    let shape = (
        header.shape[0],
        header.shape[1],
        header.shape[2],
        header.shape[3],
    );
    let data = Array4::from_shape_vec(shape, values)
        .map_err(|e| Error::format(path, format!("shape mismatch: {e}")))?;
    let spacing = [header.spacing[0], header.spacing[1], header.spacing[2]];
    Volume::new(data, spacing, header.modalities)
}

/// Masks are stored in the same container with dtype "u8" and shape
/// [1, X, Y, Z].
pub fn save_mask(path: impl AsRef<Path>, mask: &Array3<u8>, spacing: [f64; 3]) -> Result<()> {
    let path = path.as_ref();
    let s = mask.shape();
    let header = Rv01Header {
        magic: "RV01".into(),
        dtype: "u8".into(),
        shape: vec![1, s[0], s[1], s[2]],
        spacing: spacing.to_vec(),
        modalities: vec!["mask".into()],
    };
    let mut bytes = serde_json::to_string(&header)
        .map_err(|e| Error::format(path, format!("serialize header: {e}")))?
        .into_bytes();
    bytes.push(b'\n');
    let data = mask.as_standard_layout();
    bytes.extend(data.iter().copied());
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Array3<u8>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let header = read_header(path, &mut reader)?;
    if header.dtype != "u8" {
        return Err(Error::format(
            path,
            format!("dtype {:?}, expected \"u8\" for masks", header.dtype),
        ));
    }
    if header.shape[0] != 1 {
        return Err(Error::format(
            path,
            format!("mask channel axis must be 1, got {}", header.shape[0]),
        ));
    }
    let count: usize = header.shape.iter().product();
    let payload = read_payload(path, &mut reader, count)?;
    Array3::from_shape_vec((header.shape[1], header.shape[2], header.shape[3]), payload)
        .map_err(|e| Error::format(path, format!("shape mismatch: {e}")))
}

// === manifests and splits ===

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the manifest file's directory.
    pub volume: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ManifestMeta {
    split: String,
    seed: u64,
}

/// JSON-lines dataset index: a meta line ({"split": ..., "seed": ...})
/// followed by one entry per line. Referenced paths are relative to the
/// manifest's own directory and are checked for existence on load.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
    /// Directory entries resolve against; set on load/save.
    pub base: PathBuf,
}

impl DatasetManifest {
    pub fn new(split: impl Into<String>, seed: u64, entries: Vec<ManifestEntry>) -> Self {
        DatasetManifest {
            split: split.into(),
            seed,
            entries,
            base: PathBuf::new(),
        }
    }

    pub fn save(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let meta = ManifestMeta {
            split: self.split.clone(),
            seed: self.seed,
        };
        let mut out = serde_json::to_string(&meta)
            .map_err(|e| Error::format(path, format!("serialize meta: {e}")))?;
        out.push('\n');
        for entry in &self.entries {
            out.push_str(
                &serde_json::to_string(entry)
                    .map_err(|e| Error::format(path, format!("serialize entry: {e}")))?,
            );
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
        self.base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let meta_line = lines
            .next()
            .ok_or_else(|| Error::format(path, "empty manifest"))?;
        let meta: ManifestMeta = serde_json::from_str(meta_line)
            .map_err(|e| Error::format(path, format!("meta line parse: {e}")))?;
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let entry: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| Error::format(path, format!("entry {i} parse: {e}")))?;
            entries.push(entry);
        }
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let manifest = DatasetManifest {
            split: meta.split,
            seed: meta.seed,
            entries,
            base,
        };
        for entry in &manifest.entries {
            let vp = manifest.resolve(&entry.volume);
            if !vp.exists() {
                return Err(Error::Data(format!(
                    "manifest references missing volume {}",
                    vp.display()
                )));
            }
            if let Some(mask) = &entry.mask {
                let mp = manifest.resolve(mask);
                if !mp.exists() {
                    return Err(Error::Data(format!(
                        "manifest references missing mask {}",
                        mp.display()
                    )));
                }
            }
        }
        Ok(manifest)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base.join(rel)
    }

    /// Reads one entry's volume (and mask, when present) from disk.
    pub fn load_labeled<F: Scalar>(&self, entry: &ManifestEntry) -> Result<LabeledVolume<F>> {
        let volume = load_volume(self.resolve(&entry.volume))?;
        let mask = match &entry.mask {
            Some(rel) => {
                let mask = load_mask(self.resolve(rel))?;
                let (x, y, z) = volume.spatial_dims();
                if mask.shape() != [x, y, z] {
                    return Err(Error::shape(
                        format!("mask {rel}"),
                        format!("({x}, {y}, {z})"),
                        format!("{:?}", mask.shape()),
                    ));
                }
                Some(mask)
            }
            None => None,
        };
        Ok(LabeledVolume {
            volume,
            class_label: entry.class_label,
            mask,
        })
    }

    /// Reads every entry into memory.
    pub fn load_all<F: Scalar>(&self) -> Result<Vec<LabeledVolume<F>>> {
        self.entries.iter().map(|e| self.load_labeled(e)).collect()
    }
}

/// Seed-deterministic random split. `ratio` is the train fraction; the train
/// side gets round(ratio * N) entries and both sides must end up non-empty.
pub fn split_dataset(
    entries: &[ManifestEntry],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<ManifestEntry>, Vec<ManifestEntry>)> {
    if !(0.0..=1.0).contains(&ratio) || !ratio.is_finite() {
        return Err(Error::Config(format!(
            "split ratio must be within (0, 1), got {ratio}"
        )));
    }
    let n = entries.len();
    let train_n = (ratio * n as f64).round() as usize;
    if train_n == 0 || train_n == n {
        return Err(Error::Config(format!(
            "split of {n} entries at ratio {ratio} leaves an empty side"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let mut train_idx = indices[..train_n].to_vec();
    let mut test_idx = indices[train_n..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| entries[i].clone()).collect();
    Ok((pick(&train_idx), pick(&test_idx)))
}
