use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::encoders::{EncoderConfig, XfmModel};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

impl TensorEntry {
    pub fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * 4
    }
}

/// Index of a checkpoint. The blob holds every tensor as little-endian f32
/// in manifest order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub step: u64,
    pub encoder: EncoderConfig,
    /// The run configuration that produced the checkpoint, if any.
    #[serde(default)]
    pub run: Option<serde_json::Value>,
    pub blob_bytes: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor>,
}

/// Writes the blob then the manifest, each through a temporary file and a
/// rename, so a reader never sees a partial file under the final name.
pub fn save_checkpoint(dir: &Path, model: &XfmModel, step: u64, run: Option<serde_json::Value>) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(model.params().num_elements() * 4);
    let mut tensors = Vec::new();
    for (name, t) in model.params().iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for &x in t.data() {
            blob.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        step,
        encoder: model.config().clone(),
        run,
        blob_bytes: blob.len(),
        tensors,
    };
    write_atomic(&dir.join(BLOB_FILE), &blob)?;
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path),
            _ => e.into(),
        })
    };
    let manifest: Manifest = serde_json::from_slice(&read(MANIFEST_FILE)?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", manifest.format_version)));
    }
    let blob = read(BLOB_FILE)?;
    if blob.len() != manifest.blob_bytes {
        return Err(Error::Checkpoint(format!(
            "blob has {} bytes, manifest records {} (truncated or corrupt)",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let end = e.offset.checked_add(e.byte_len()).filter(|&end| end <= blob.len()).ok_or_else(|| {
            Error::Checkpoint(format!("tensor {} at offset {} runs past the blob end", e.name, e.offset))
        })?;
        let data = blob[e.offset..end]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        tensors.push(Tensor::new(e.shape.clone(), data)?);
    }
    Ok(Checkpoint { manifest, tensors })
}

impl Checkpoint {
    /// Builds a model of the stored configuration. When `expected` is
    /// given, the stored configuration must match it.
    pub fn into_model(self, expected: Option<&EncoderConfig>) -> Result<XfmModel> {
        let stored = &self.manifest.encoder;
        if let Some(want) = expected {
            if want.hidden_dim != stored.hidden_dim {
                return Err(Error::Checkpoint(format!(
                    "checkpoint hidden_dim {} does not match configured hidden_dim {}",
                    stored.hidden_dim, want.hidden_dim
                )));
            }
            if want != stored {
                return Err(Error::Checkpoint(format!(
                    "checkpoint encoder config {stored:?} does not match {want:?}"
                )));
            }
        }
        let mut model = XfmModel::new(stored.clone(), 0)?;
        if self.manifest.tensors.len() != model.params().len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                self.manifest.tensors.len(),
                model.params().len()
            )));
        }
        for (e, t) in self.manifest.tensors.iter().zip(self.tensors) {
            let id = model
                .params()
                .id(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", e.name)))?;
            let want = model.params().get(id).shape().to_vec();
            if want != e.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, model expects {want:?}",
                    e.name, e.shape
                )));
            }
            model.params_mut().set(id, t)?;
        }
        Ok(model)
    }
}

/// Loads a checkpoint straight into a model.
pub fn load_model(dir: &Path, expected: Option<&EncoderConfig>) -> Result<XfmModel> {
    load_checkpoint(dir)?.into_model(expected)
}
