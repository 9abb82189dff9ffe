//! Checkpoint directories: a JSON manifest plus raw little-endian tensors.
//!
//! Layout:
//! - `manifest.json`: format version, training config, tensor names/shapes,
//!   vocabulary and payload digests, epoch counter and history
//! - `params.bin`: every tensor in store order, row-major `f64`
//! - `optimizer.bin`: AdamW first then second moments of trainable tensors
//! - `vocab.json`, `ontology.json`
//!
//! Random streams are derived from the seed and epoch/instance indices, so
//! the epoch counter is the only RNG state needed to resume.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DstError, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::ontology::Ontology;
use crate::optim::AdamW;
use crate::params::{Mat, ParamGroup};
use crate::text::Vocabulary;
use crate::training::{EpochStats, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub ontology: Ontology,
    pub vocab: Vocabulary,
    pub model: ModelParams,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_joint: Option<f64>,
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    group: ParamGroup,
    shape: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: TrainConfig,
    model: ModelConfig,
    epoch: usize,
    best_val_joint: Option<f64>,
    history: Vec<EpochStats>,
    optimizer_step: u64,
    vocab_sha256: String,
    params_sha256: String,
    optimizer_sha256: String,
    tensors: Vec<TensorInfo>,
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn push_mat(buf: &mut Vec<u8>, m: &Mat) {
    for v in m.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_mat(bytes: &[u8], offset: &mut usize, shape: (usize, usize)) -> Result<Mat> {
    let n = shape.0 * shape.1;
    let end = *offset + n * 8;
    if end > bytes.len() {
        return Err(DstError::Checkpoint("tensor payload truncated".into()));
    }
    let vals: Vec<f64> = bytes[*offset..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    *offset = end;
    Ok(Mat::from_shape_vec(shape, vals).expect("length matches shape"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| DstError::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| DstError::io(path, e))
}

impl Checkpoint {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| DstError::io(dir, e))?;
        let store = &self.model.store;
        let mut params = Vec::with_capacity(store.num_scalars() * 8);
        for e in store.entries() {
            push_mat(&mut params, &e.value);
        }
        let mut opt = Vec::new();
        for moments in [&self.optimizer.m, &self.optimizer.v] {
            for m in moments {
                push_mat(&mut opt, m);
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            // Where a run writes is not part of its state.
            config: TrainConfig {
                checkpoint_dir: None,
                ..self.config.clone()
            },
            model: self.model.config.clone(),
            epoch: self.epoch,
            best_val_joint: self.best_val_joint,
            history: self.history.clone(),
            optimizer_step: self.optimizer.step,
            vocab_sha256: self.vocab.fingerprint(),
            params_sha256: sha_hex(&params),
            optimizer_sha256: sha_hex(&opt),
            tensors: store
                .entries()
                .iter()
                .map(|e| TensorInfo {
                    name: e.name.clone(),
                    group: e.group,
                    shape: [e.value.nrows(), e.value.ncols()],
                })
                .collect(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write(&dir.join("params.bin"), &params)?;
        write(&dir.join("optimizer.bin"), &opt)?;
        write(&dir.join("vocab.json"), self.vocab.to_json_string().as_bytes())?;
        write(&dir.join("ontology.json"), self.ontology.to_json_string().as_bytes())?;
        write(&dir.join("manifest.json"), json.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Self::load_inner(dir.as_ref(), None)
    }

    /// Loads against an expected architecture; tensors whose shapes differ
    /// from what `model` implies are rejected.
    pub fn load_with_config(dir: impl AsRef<Path>, model: &ModelConfig) -> Result<Self> {
        Self::load_inner(dir.as_ref(), Some(model))
    }

    fn load_inner(dir: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&read(&dir.join("manifest.json"))?)
            .map_err(|e| DstError::Checkpoint(format!("bad manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(DstError::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let vocab = Vocabulary::load(dir.join("vocab.json"))?;
        if vocab.fingerprint() != manifest.vocab_sha256 {
            return Err(DstError::Checkpoint("vocabulary does not match manifest".into()));
        }
        let ontology_path = dir.join("ontology.json");
        let ontology_text = fs::read_to_string(&ontology_path).map_err(|e| DstError::io(&ontology_path, e))?;
        let ontology = Ontology::from_json_str(&ontology_text)?;
        let params = read(&dir.join("params.bin"))?;
        if sha_hex(&params) != manifest.params_sha256 {
            return Err(DstError::Checkpoint("params.bin is corrupted (digest mismatch)".into()));
        }
        let opt = read(&dir.join("optimizer.bin"))?;
        if sha_hex(&opt) != manifest.optimizer_sha256 {
            return Err(DstError::Checkpoint("optimizer.bin is corrupted (digest mismatch)".into()));
        }

        let model_config = expected.cloned().unwrap_or_else(|| manifest.model.clone());
        let mut model = ModelParams::init(model_config, vocab.len(), manifest.config.seed)?;
        if model.store.len() != manifest.tensors.len() {
            return Err(DstError::Shape(format!(
                "checkpoint has {} tensors, model expects {}",
                manifest.tensors.len(),
                model.store.len()
            )));
        }
        for (e, t) in model.store.entries().iter().zip(&manifest.tensors) {
            let shape = [e.value.nrows(), e.value.ncols()];
            if e.name != t.name || e.group != t.group || shape != t.shape {
                return Err(DstError::Shape(format!(
                    "tensor `{}` {:?} in checkpoint, model expects `{}` {:?}",
                    t.name, t.shape, e.name, shape
                )));
            }
        }
        let mut offset = 0;
        for e in model.store.entries_mut() {
            e.value = read_mat(&params, &mut offset, e.value.dim())?;
        }
        if offset != params.len() {
            return Err(DstError::Checkpoint("trailing bytes in params.bin".into()));
        }

        let mut optimizer = AdamW::new(manifest.config.optimizer_config(), &model.store);
        optimizer.step = manifest.optimizer_step;
        let mut offset = 0;
        for i in 0..optimizer.m.len() {
            optimizer.m[i] = read_mat(&opt, &mut offset, optimizer.m[i].dim())?;
        }
        for i in 0..optimizer.v.len() {
            optimizer.v[i] = read_mat(&opt, &mut offset, optimizer.v[i].dim())?;
        }
        if offset != opt.len() {
            return Err(DstError::Checkpoint("trailing bytes in optimizer.bin".into()));
        }

        Ok(Checkpoint {
            config: manifest.config,
            ontology,
            vocab,
            model,
            optimizer,
            epoch: manifest.epoch,
            best_val_joint: manifest.best_val_joint,
            history: manifest.history,
        })
    }
}
