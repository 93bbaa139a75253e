//! Parameter snapshots in safetensors format with string metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::params::ParamStore;

fn ckpt_err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

/// Writes every parameter of `store` (as f32) and `metadata` to `path`.
pub fn save(store: &ParamStore, path: &Path, metadata: &BTreeMap<String, String>) -> Result<()> {
    let mut buffers = Vec::new();
    for (name, var) in store.vars() {
        let t = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?;
        let bytes: Vec<u8> = t.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect();
        buffers.push((name, var.dims().to_vec(), bytes));
    }
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes).map(|v| (name.clone(), v))
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(ckpt_err)?;
    let meta: HashMap<String, String> = metadata.clone().into_iter().collect();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    safetensors::serialize_to_file(views, Some(meta), path).map_err(ckpt_err)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_metadata(path: &Path) -> Result<BTreeMap<String, String>> {
    let bytes = read(path)?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(ckpt_err)?;
    Ok(meta
        .metadata()
        .clone()
        .map(|m| m.into_iter().collect())
        .unwrap_or_default())
}

/// Loads parameters into `store`. Every store parameter must be present with
/// a matching shape; returns the file metadata.
pub fn load(store: &ParamStore, path: &Path) -> Result<BTreeMap<String, String>> {
    let bytes = read(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(ckpt_err)?;
    for (name, var) in store.vars() {
        let view = st
            .tensor(&name)
            .map_err(|_| Error::Checkpoint(format!("missing parameter {name}")))?;
        if view.shape() != var.dims() {
            return Err(Error::Checkpoint(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                view.shape(),
                var.dims()
            )));
        }
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("{name}: expected f32 data")));
        }
        let values: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::from_vec(values, view.shape(), store.device())?;
        store.set(&name, &t)?;
    }
    read_metadata(path)
}
