//! Checkpoint format: a single JSON header line (dims, tensor shapes,
//! format version) followed by every tensor's values as little-endian `f64`
//! in declared order. Round-trips are bit-exact.

use super::{ModelError, ModelParams, TENSOR_NAMES};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    feature_dim: usize,
    hidden_dim: usize,
    num_classes: usize,
    tensors: Vec<TensorInfo>,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

fn tensor_shapes(params: &ModelParams) -> Vec<TensorInfo> {
    let d = params.feature_dim();
    let h = params.hidden_dim();
    let heads = params.num_classes() + 1;
    let shapes: [Vec<usize>; 8] = [
        vec![d, h],
        vec![d, h],
        vec![d, h],
        vec![h],
        vec![h],
        vec![1],
        vec![h, heads],
        vec![heads],
    ];
    TENSOR_NAMES
        .iter()
        .zip(shapes)
        .map(|(&name, shape)| TensorInfo { name: name.to_string(), shape })
        .collect()
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        feature_dim: params.feature_dim(),
        hidden_dim: params.hidden_dim(),
        num_classes: params.num_classes(),
        tensors: tensor_shapes(params),
    };
    let mut bytes = serde_json::to_vec(&header)
        .map_err(|e| ModelError::Checkpoint { file: path.to_path_buf(), reason: e.to_string() })?;
    bytes.push(b'\n');
    for i in 0..params.param_count() {
        bytes.extend_from_slice(&params.flat_get(i).to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)
            .map_err(|source| ModelError::CheckpointIo { file: path.to_path_buf(), source })?;
    }
    fs::write(path, bytes)
        .map_err(|source| ModelError::CheckpointIo { file: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let err = |reason: String| ModelError::Checkpoint { file: path.to_path_buf(), reason };
    let bytes = fs::read(path)
        .map_err(|source| ModelError::CheckpointIo { file: path.to_path_buf(), source })?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| err("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| err(format!("malformed header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(err(format!(
            "unsupported format version {} (supported: {CHECKPOINT_VERSION})",
            header.format_version
        )));
    }

    let mut params = ModelParams::zeros(header.feature_dim, header.hidden_dim, header.num_classes);
    let expected_shapes = tensor_shapes(&params);
    if header.tensors.len() != expected_shapes.len() {
        return Err(err(format!("expected 8 tensors, header lists {}", header.tensors.len())));
    }
    for (got, want) in header.tensors.iter().zip(&expected_shapes) {
        if got.name != want.name || got.shape != want.shape {
            return Err(err(format!(
                "tensor {} has shape {:?}, expected {} {:?}",
                got.name, got.shape, want.name, want.shape
            )));
        }
    }

    let payload = &bytes[newline + 1..];
    let count = params.param_count();
    if payload.len() != count * 8 {
        return Err(err(format!(
            "payload holds {} values, dims require {count}",
            payload.len() / 8
        )));
    }
    for (i, chunk) in payload.chunks_exact(8).enumerate() {
        params.flat_set(i, f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(params)
}
