//! Checkpoints: a JSON manifest plus one VOXT blob per parameter tensor,
//! written into a directory in manifest order. Batch-norm running statistics
//! are stored alongside the learnable tensors since evaluation needs them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{GraphError, LayerGraph, LayerParams, Network};
use crate::scalar::Scalar;
use crate::voxel::{read_voxt, write_voxt, FeatureMap, MapShape, VoxtError};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Voxt(#[from] VoxtError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("checkpoint precision is {found}, caller expects {expected}")]
    WrongPrecision { expected: String, found: String },
    #[error("checkpoint does not match graph: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub file: String,
    pub layer: usize,
    pub role: String,
    /// Logical dimensions of the tensor (payload is C-order flat).
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub library_version: String,
    pub precision: String,
    pub seed: u64,
    pub in_channels: usize,
    pub grid: [usize; 3],
    pub graph: LayerGraph,
    pub tensors: Vec<TensorEntry>,
}

/// Flatten a tensor into a VOXT container shape. Filters keep their group
/// and kernel axes; vectors are stored as `[n, 1, 1, 1, 1]`.
fn as_voxt<T: Scalar>(data: &[T], shape: MapShape) -> FeatureMap<T> {
    FeatureMap::from_vec(shape, data.to_vec()).expect("internal blob shape")
}

fn enumerate_tensors<T: Scalar>(net: &Network<T>) -> Vec<(TensorEntry, FeatureMap<T>)> {
    let mut out = Vec::new();
    let mut push = |layer: usize, role: &str, dims: Vec<usize>, blob: FeatureMap<T>| {
        let file = format!("{:03}_{}.voxt", out.len(), role);
        out.push((
            TensorEntry {
                file,
                layer,
                role: role.to_string(),
                dims,
            },
            blob,
        ));
    };
    for (index, params) in net.params().iter().enumerate() {
        match params {
            LayerParams::Conv { filters, bias } => {
                let (k, i, g, kk) = (
                    filters.out_channels(),
                    filters.in_channels(),
                    filters.group_size(),
                    filters.kernel(),
                );
                push(
                    index,
                    "conv_filters",
                    vec![k, i, g, kk, kk, kk],
                    as_voxt(filters.data(), MapShape::new(k * i, g, kk, kk, kk)),
                );
                push(
                    index,
                    "conv_bias",
                    vec![bias.len()],
                    as_voxt(bias, MapShape::new(bias.len(), 1, 1, 1, 1)),
                );
            }
            LayerParams::BatchNorm { gamma, beta, running_mean, running_var } => {
                for (role, v) in [
                    ("bn_gamma", gamma),
                    ("bn_beta", beta),
                    ("bn_running_mean", running_mean),
                    ("bn_running_var", running_var),
                ] {
                    push(index, role, vec![v.len()], as_voxt(v, MapShape::new(v.len(), 1, 1, 1, 1)));
                }
            }
            LayerParams::Dense { weight, bias, in_features, out_features } => {
                push(
                    index,
                    "dense_weight",
                    vec![*out_features, *in_features],
                    as_voxt(weight, MapShape::new(*out_features, 1, 1, 1, *in_features)),
                );
                push(
                    index,
                    "dense_bias",
                    vec![bias.len()],
                    as_voxt(bias, MapShape::new(bias.len(), 1, 1, 1, 1)),
                );
            }
            LayerParams::None => {}
        }
    }
    out
}

/// Write `manifest.json` plus one VOXT file per tensor under `dir/params/`.
pub fn save_network<T: Scalar>(dir: impl AsRef<Path>, net: &Network<T>) -> Result<(), CheckpointError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("params"))?;
    let tensors = enumerate_tensors(net);
    let manifest = CheckpointManifest {
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        precision: T::DTYPE.name().to_string(),
        seed: net.seed(),
        in_channels: net.in_channels(),
        grid: net.grid(),
        graph: net.graph().clone(),
        tensors: tensors.iter().map(|(e, _)| e.clone()).collect(),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    for (entry, blob) in &tensors {
        write_voxt(dir.join("params").join(&entry.file), blob)?;
    }
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest, CheckpointError> {
    let raw = fs::read_to_string(dir.as_ref().join("manifest.json"))?;
    Ok(serde_json::from_str(&raw)?)
}

/// Rebuild a network from a checkpoint directory. The requested scalar type
/// must match the manifest's precision.
pub fn load_network<T: Scalar>(dir: impl AsRef<Path>) -> Result<Network<T>, CheckpointError> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    if manifest.precision != T::DTYPE.name() {
        return Err(CheckpointError::WrongPrecision {
            expected: T::DTYPE.name().to_string(),
            found: manifest.precision,
        });
    }
    let mut net = Network::<T>::init(manifest.graph.clone(), manifest.in_channels, manifest.grid, manifest.seed)?;
    let expected = enumerate_tensors(&net);
    if expected.len() != manifest.tensors.len() {
        return Err(CheckpointError::Mismatch(format!(
            "graph wants {} tensors, manifest lists {}",
            expected.len(),
            manifest.tensors.len()
        )));
    }
    let mut blobs = Vec::with_capacity(manifest.tensors.len());
    for (want, entry) in expected.iter().zip(&manifest.tensors) {
        if want.0.role != entry.role || want.0.layer != entry.layer || want.0.dims != entry.dims {
            return Err(CheckpointError::Mismatch(format!(
                "tensor {} ({:?}) does not match graph slot {} ({:?})",
                entry.file, entry.dims, want.0.file, want.0.dims
            )));
        }
        let blob: FeatureMap<T> = read_voxt(dir.join("params").join(&entry.file))?;
        if blob.shape() != want.1.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "blob {} has shape {:?}, expected {:?}",
                entry.file,
                blob.shape(),
                want.1.shape()
            )));
        }
        blobs.push(blob.into_data());
    }
    // Overwrite the freshly initialized tensors in enumeration order.
    let mut next = blobs.into_iter();
    for params in net.params_mut() {
        match params {
            LayerParams::Conv { filters, bias } => {
                filters.data_mut().copy_from_slice(&next.next().unwrap());
                bias.copy_from_slice(&next.next().unwrap());
            }
            LayerParams::BatchNorm { gamma, beta, running_mean, running_var } => {
                gamma.copy_from_slice(&next.next().unwrap());
                beta.copy_from_slice(&next.next().unwrap());
                running_mean.copy_from_slice(&next.next().unwrap());
                running_var.copy_from_slice(&next.next().unwrap());
            }
            LayerParams::Dense { weight, bias, .. } => {
                weight.copy_from_slice(&next.next().unwrap());
                bias.copy_from_slice(&next.next().unwrap());
            }
            LayerParams::None => {}
        }
    }
    Ok(net)
}
