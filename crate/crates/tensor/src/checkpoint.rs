//! Parameter checkpoints: a JSON index plus one raw little-endian `f32` blob.
//!
//! The index maps each parameter name to its shape, byte offset into the
//! blob and element count. The blob sits next to the index with the `.bin`
//! extension.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Element, ParamStore, Result, Tensor, TensorError};

pub const CHECKPOINT_FORMAT: &str = "cardioreg-ckpt-1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub shape: Vec<usize>,
    pub offset: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub format: String,
    pub dtype: String,
    pub blob: String,
    pub tensors: BTreeMap<String, CheckpointEntry>,
}

/// A loaded checkpoint, values held as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn blob_path(index_path: &Path) -> PathBuf {
    index_path.with_extension("bin")
}

/// Writes `store` to `index_path` and its sibling `.bin` blob.
///
/// Values are stored as `f32`; an `f32` store round-trips bit-exactly.
pub fn save_checkpoint<T: Element>(store: &ParamStore<T>, index_path: &Path) -> Result<()> {
    let blob = blob_path(index_path);
    let mut bytes = Vec::with_capacity(store.num_elements() * 4);
    let mut tensors = BTreeMap::new();
    for p in store.iter() {
        tensors.insert(
            p.name.clone(),
            CheckpointEntry {
                shape: p.value.shape().to_vec(),
                offset: bytes.len(),
                count: p.value.numel(),
            },
        );
        for &v in p.value.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let index = CheckpointIndex {
        format: CHECKPOINT_FORMAT.into(),
        dtype: "f32le".into(),
        blob: blob
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string(),
        tensors,
    };
    fs::write(&blob, bytes)?;
    fs::write(index_path, serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

pub fn load_checkpoint(index_path: &Path) -> Result<Checkpoint> {
    let index: CheckpointIndex = serde_json::from_slice(&fs::read(index_path)?)?;
    if index.format != CHECKPOINT_FORMAT || index.dtype != "f32le" {
        return Err(TensorError::Checkpoint(format!(
            "unsupported format {} / {}",
            index.format, index.dtype
        )));
    }
    let blob_file = index_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&index.blob);
    let bytes = fs::read(&blob_file)?;
    let mut tensors = BTreeMap::new();
    for (name, e) in index.tensors {
        let end = e.offset + e.count * 4;
        if end > bytes.len() || e.shape.iter().product::<usize>() != e.count {
            return Err(TensorError::Checkpoint(format!(
                "entry `{name}` does not fit the blob"
            )));
        }
        let data = bytes[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, Tensor::new(e.shape, data)?);
    }
    Ok(Checkpoint { tensors })
}

impl<T: Element> ParamStore<T> {
    /// Overwrites every parameter with the checkpoint value of the same
    /// name. Names and shapes must match exactly; Adam state is reset.
    pub fn load_values(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.tensors.len() != self.len() {
            return Err(TensorError::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                ckpt.tensors.len(),
                self.len()
            )));
        }
        for p in self.params_mut() {
            let t = ckpt.tensors.get(&p.name).ok_or_else(|| {
                TensorError::Checkpoint(format!("missing tensor `{}`", p.name))
            })?;
            if t.shape() != p.value.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "`{}` has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
            p.adam.m.iter_mut().for_each(|x| *x = T::zero());
            p.adam.v.iter_mut().for_each(|x| *x = T::zero());
            p.adam.step = 0;
        }
        Ok(())
    }
}
