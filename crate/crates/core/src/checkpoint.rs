//! Versioned JSON checkpoints for model parameters.
//!
//! Floats are written in round-trip decimal form, so save/load is
//! value-exact and identical parameters produce byte-identical files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Array, PoolMode};
use crate::model::{ModelDims, ModelParams, ParamSet, VisualSpec};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed checkpoint file: {0}")]
    Malformed(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u64, expected: u32 },
    #[error("checkpoint tensor {name}: data length {len} does not match shape {shape:?}")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("checkpoint is incompatible with the dataset: {0}")]
    Incompatible(String),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    hidden_dim: usize,
    conv_kernels: usize,
    num_predicates: usize,
    num_classes: usize,
    visual: VisualSpec,
    pooling: PoolMode,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        hidden_dim: params.dims.hidden,
        conv_kernels: params.dims.conv_kernels,
        num_predicates: params.dims.num_predicates,
        num_classes: params.dims.num_classes,
        visual: params.dims.visual,
        pooling: params.dims.pooling,
        tensors: params
            .tensors
            .iter()
            .map(|(name, array)| TensorEntry {
                name: name.to_string(),
                shape: array.shape().to_vec(),
                data: array.data().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let mut out = fs::File::create(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    out.write_all(json.as_bytes())
        .and_then(|_| out.write_all(b"\n"))
        .map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, CheckpointError> {
    let text = fs::read_to_string(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    // Check the version before strict parsing so newer formats fail with a
    // version error rather than a generic parse error.
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| CheckpointError::Malformed("missing format_version".into()))?;
    if found != CHECKPOINT_VERSION as u64 {
        return Err(CheckpointError::VersionMismatch {
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    let file: CheckpointFile =
        serde_json::from_value(value).map_err(|e| CheckpointError::Malformed(e.to_string()))?;

    let mut pairs = Vec::with_capacity(file.tensors.len());
    for t in file.tensors {
        let expected: usize = t.shape.iter().product();
        if t.data.len() != expected {
            return Err(CheckpointError::ShapeMismatch {
                name: t.name,
                shape: t.shape,
                len: t.data.len(),
            });
        }
        let array = Array::from_vec(t.shape.clone(), t.data).map_err(|_| {
            CheckpointError::ShapeMismatch {
                name: t.name.clone(),
                shape: t.shape.clone(),
                len: 0,
            }
        })?;
        pairs.push((t.name, array));
    }
    let params = ModelParams {
        dims: ModelDims {
            hidden: file.hidden_dim,
            conv_kernels: file.conv_kernels,
            num_predicates: file.num_predicates,
            num_classes: file.num_classes,
            visual: file.visual,
            pooling: file.pooling,
        },
        tensors: ParamSet::from_pairs(pairs),
    };
    verify_tensor_shapes(&params)?;
    Ok(params)
}

/// The tensor set must match what the declared dims require.
fn verify_tensor_shapes(params: &ModelParams) -> Result<(), CheckpointError> {
    let expected = params.dims.tensor_shapes();
    let expected_names: Vec<&str> = expected.iter().map(|(n, _)| *n).collect();
    if params.tensors.names() != expected_names {
        return Err(CheckpointError::Malformed(format!(
            "tensor set {:?} does not match architecture (expected {:?})",
            params.tensors.names(),
            expected_names
        )));
    }
    for ((name, got), (_, want)) in params.tensors.iter().zip(&expected) {
        if got.shape() != want.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                shape: got.shape().to_vec(),
                len: got.len(),
            });
        }
    }
    Ok(())
}

/// Validates a loaded checkpoint against a dataset's vocabulary sizes and
/// visual feature shape. Run before any compute.
pub fn check_compat(
    params: &ModelParams,
    num_predicates: usize,
    num_classes: usize,
    visual: VisualSpec,
) -> Result<(), CheckpointError> {
    if params.dims.num_predicates != num_predicates {
        return Err(CheckpointError::Incompatible(format!(
            "checkpoint has {} predicates, dataset header declares {}",
            params.dims.num_predicates, num_predicates
        )));
    }
    if params.dims.num_classes != num_classes {
        return Err(CheckpointError::Incompatible(format!(
            "checkpoint has {} object classes, dataset header declares {}",
            params.dims.num_classes, num_classes
        )));
    }
    if params.dims.visual != visual {
        return Err(CheckpointError::Incompatible(format!(
            "checkpoint visual mode {:?} differs from dataset header {:?}",
            params.dims.visual, visual
        )));
    }
    Ok(())
}
