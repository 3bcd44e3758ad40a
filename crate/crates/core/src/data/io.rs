//! Dataset directory format.
//!
//! A dataset directory holds `manifest.json` plus one `<id>.feat` per video.
//! The feature file is a 16-byte header — magic `"GTF1"`, little-endian `u32`
//! snippet count N, little-endian `u32` feature dim D, 4 reserved zero bytes —
//! followed by `N * D` little-endian IEEE-754 `f32` values, snippet-major.

use super::{DataError, Dataset, FeatureSequence, GroundTruthInstance, Split, VideoRecord};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const FEAT_MAGIC: [u8; 4] = *b"GTF1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    distribution_id: String,
    split: Split,
    num_classes: usize,
    videos: Vec<ManifestVideo>,
}

#[derive(Serialize, Deserialize)]
struct ManifestVideo {
    id: String,
    duration: f64,
    snippet_stride: f64,
    label: Vec<u8>,
    instances: Vec<GroundTruthInstance>,
}

fn io_err(file: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { file: file.to_path_buf(), source }
}

/// Writes `ds` into `dir` (created if missing). `load_dataset(save_dataset(ds))`
/// restores `ds` bit-exactly.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        distribution_id: ds.distribution_id.clone(),
        split: ds.split,
        num_classes: ds.num_classes,
        videos: ds
            .videos
            .iter()
            .map(|v| ManifestVideo {
                id: v.id.clone(),
                duration: v.duration,
                snippet_stride: v.features.snippet_stride(),
                label: v.label.clone(),
                instances: v.instances.clone(),
            })
            .collect(),
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|source| DataError::Json { file: manifest_path.clone(), source })?;
    fs::write(&manifest_path, json + "\n").map_err(io_err(&manifest_path))?;

    for video in &ds.videos {
        let path = dir.join(format!("{}.feat", video.id));
        let data = video.features.data();
        let (n, d) = (data.nrows(), data.ncols());
        let mut buf = Vec::with_capacity(16 + 4 * n * d);
        buf.extend_from_slice(&FEAT_MAGIC);
        buf.extend_from_slice(&(n as u32).to_le_bytes());
        buf.extend_from_slice(&(d as u32).to_le_bytes());
        buf.extend_from_slice(&[0u8; 4]);
        for value in data.iter() {
            buf.extend_from_slice(&value.to_le_bytes());
        }
        fs::write(&path, buf).map_err(io_err(&path))?;
    }
    Ok(())
}

fn read_features(path: &Path, stride: f64) -> Result<FeatureSequence, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 16 || bytes[..4] != FEAT_MAGIC {
        return Err(DataError::BadMagic { file: path.to_path_buf() });
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = n * d;
    let payload = &bytes[16..];
    if payload.len() != expected * 4 {
        return Err(DataError::DimensionMismatch {
            file: path.to_path_buf(),
            expected,
            found: payload.len() / 4,
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data = Array2::from_shape_vec((n, d), values).expect("shape checked above");
    FeatureSequence::new(data, stride)
}

fn malformed(file: &Path, field: impl Into<String>, reason: impl Into<String>) -> DataError {
    DataError::Malformed { file: file.to_path_buf(), field: field.into(), reason: reason.into() }
}

/// Reads a dataset directory written by [`save_dataset`], validating the
/// manifest invariants and every feature file header.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest_path = dir.join("manifest.json");
    let raw = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&raw)
        .map_err(|source| DataError::Json { file: manifest_path.clone(), source })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DataError::UnsupportedVersion {
            file: manifest_path,
            found: manifest.format_version,
            supported: FORMAT_VERSION,
        });
    }

    let mut videos = Vec::with_capacity(manifest.videos.len());
    let mut dim: Option<usize> = None;
    for entry in manifest.videos {
        if entry.id.contains(['/', '\\']) || entry.id.contains("..") {
            return Err(malformed(&manifest_path, "id", format!("unsafe video id {:?}", entry.id)));
        }
        if entry.label.len() != manifest.num_classes {
            return Err(malformed(
                &manifest_path,
                format!("videos[{}].label", entry.id),
                format!("length {} != num_classes {}", entry.label.len(), manifest.num_classes),
            ));
        }
        for inst in &entry.instances {
            if inst.end <= inst.start {
                return Err(malformed(
                    &manifest_path,
                    format!("videos[{}].instances", entry.id),
                    format!("degenerate segment [{}, {}]", inst.start, inst.end),
                ));
            }
            if inst.class_id >= manifest.num_classes {
                return Err(malformed(
                    &manifest_path,
                    format!("videos[{}].instances", entry.id),
                    format!("class_id {} out of range", inst.class_id),
                ));
            }
            if inst.start < 0.0 || inst.end > entry.duration + 1e-9 {
                return Err(malformed(
                    &manifest_path,
                    format!("videos[{}].instances", entry.id),
                    format!("segment [{}, {}] outside [0, {}]", inst.start, inst.end, entry.duration),
                ));
            }
        }
        for (c, &flag) in entry.label.iter().enumerate() {
            let present = entry.instances.iter().any(|i| i.class_id == c);
            if (flag == 1) != present {
                return Err(malformed(
                    &manifest_path,
                    format!("videos[{}].label", entry.id),
                    format!("label[{c}] = {flag} inconsistent with instances"),
                ));
            }
        }

        let feat_path = dir.join(format!("{}.feat", entry.id));
        let features = read_features(&feat_path, entry.snippet_stride)?;
        match dim {
            None => dim = Some(features.dim()),
            Some(d) if d != features.dim() => {
                return Err(DataError::DimensionMismatch {
                    file: feat_path,
                    expected: d * features.num_snippets(),
                    found: features.dim() * features.num_snippets(),
                });
            }
            Some(_) => {}
        }
        videos.push(VideoRecord {
            id: entry.id,
            features,
            label: entry.label,
            instances: entry.instances,
            duration: entry.duration,
        });
    }

    Ok(Dataset {
        distribution_id: manifest.distribution_id,
        split: manifest.split,
        videos,
        num_classes: manifest.num_classes,
    })
}
