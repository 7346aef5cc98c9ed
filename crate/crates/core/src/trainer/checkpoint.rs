//! Checkpoint directories: `manifest.json` (metadata and tensor table) next
//! to `params.bin` (raw little-endian `f64` payload).

use std::collections::HashSet;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::autonet::{build_unet, ParamSet, UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::fsutil::{read_json, write_atomic, write_json};
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::optim::AdamState;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
pub const MASK_TOKEN: &str = "mask_token";
const DTYPE: &str = "f64le";

/// Training provenance stored alongside the tensors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: Option<TrainConfig>,
    pub epoch: usize,
    pub step: usize,
    pub loss_history: Vec<f64>,
    /// Corpus indices used for optimization, in training order.
    pub training_cases: Vec<usize>,
    pub validation_cases: Vec<usize>,
    /// Where the weights started from (`"seeded"` or a checkpoint path).
    pub init: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: UNetConfig,
    /// Network parameters, followed by [`MASK_TOKEN`] when token imputation
    /// was trained.
    pub params: ParamSet,
    pub adam: Option<AdamState>,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: UNetConfig,
    pub meta: CheckpointMeta,
    pub adam_steps: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Seeded initial weights without optimizer state.
    pub fn from_model(net: &UNet) -> Self {
        Checkpoint {
            model: net.config().clone(),
            params: net.params().clone(),
            adam: None,
            meta: CheckpointMeta {
                init: "seeded".into(),
                ..CheckpointMeta::default()
            },
        }
    }

    /// The network described by this checkpoint.
    pub fn network(&self) -> Result<UNet> {
        let mut params = ParamSet::new();
        for (n, t) in self.params.iter().filter(|(n, _)| *n != MASK_TOKEN) {
            params.push(n, t.clone());
        }
        build_unet(&self.model)?.with_params(params)
    }

    pub fn mask_token(&self) -> Option<&Tensor> {
        self.params.get(MASK_TOKEN)
    }

    fn tables(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some(a) = &self.adam {
            for (n, t) in self.params.names().iter().zip(&a.m) {
                out.push((format!("adam.m/{n}"), t));
            }
            for (n, t) in self.params.names().iter().zip(&a.v) {
                out.push((format!("adam.v/{n}"), t));
            }
        }
        out
    }

    /// Manifest and blob bytes.
    pub fn encode(&self) -> (Manifest, Vec<u8>) {
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in self.tables() {
            let offset = blob.len();
            let mut buf = vec![0u8; t.len() * 8];
            LittleEndian::write_f64_into(t.data(), &mut buf);
            blob.extend_from_slice(&buf);
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                dtype: DTYPE.into(),
                offset,
                length: buf.len(),
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            model: self.model.clone(),
            meta: self.meta.clone(),
            adam_steps: self.adam.as_ref().map(|a| a.t),
            tensors,
        };
        (manifest, blob)
    }

    pub fn decode(manifest: Manifest, blob: &[u8]) -> Result<Self> {
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let mut seen = HashSet::new();
        let mut params = ParamSet::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &manifest.tensors {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::CorruptManifest(format!("duplicate tensor {}", e.name)));
            }
            if e.dtype != DTYPE {
                return Err(Error::CorruptManifest(format!("{}: dtype {}", e.name, e.dtype)));
            }
            let end = e.offset.saturating_add(e.length);
            if end > blob.len() {
                return Err(Error::BlobOutOfBounds {
                    name: e.name.clone(),
                    offset: e.offset,
                    end,
                    blob_len: blob.len(),
                });
            }
            let count: usize = e.shape.iter().product();
            if e.length != count * 8 {
                return Err(Error::CorruptManifest(format!(
                    "{}: {} bytes for shape {:?}",
                    e.name, e.length, e.shape
                )));
            }
            let mut data = vec![0.0; count];
            LittleEndian::read_f64_into(&blob[e.offset..end], &mut data);
            let t = Tensor::new(e.shape.clone(), data)?;
            if let Some(n) = e.name.strip_prefix("adam.m/") {
                m.push((n.to_string(), t));
            } else if let Some(n) = e.name.strip_prefix("adam.v/") {
                v.push((n.to_string(), t));
            } else {
                params.push(e.name.clone(), t);
            }
        }
        let adam = match manifest.adam_steps {
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(Error::CorruptManifest("optimizer moments without a step count".into())),
            Some(t) => {
                let names_match = |xs: &[(String, Tensor)]| {
                    xs.len() == params.len() && xs.iter().zip(params.names()).all(|((a, _), b)| a == b)
                };
                if !names_match(&m) || !names_match(&v) {
                    return Err(Error::CorruptManifest("optimizer moments do not match parameters".into()));
                }
                Some(AdamState {
                    m: m.into_iter().map(|(_, t)| t).collect(),
                    v: v.into_iter().map(|(_, t)| t).collect(),
                    t,
                })
            }
        };
        Ok(Checkpoint {
            model: manifest.model,
            params,
            adam,
            meta: manifest.meta,
        })
    }
}

/// Writes `dir/manifest.json` and `dir/params.bin`, each atomically.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let (manifest, blob) = ckpt.encode();
    write_atomic(&dir.join(BLOB_FILE), &blob)?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    let blob_path = dir.join(BLOB_FILE);
    let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    Checkpoint::decode(manifest, &blob)
}
