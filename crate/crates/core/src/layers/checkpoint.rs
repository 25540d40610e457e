//! Checkpoints: `architecture.json` describing the model and its tensors,
//! plus `params.bin` holding every tensor as little-endian f32 in order.

use std::path::Path;

use cfsim_tensor::{ParamKind, ParamStore, Tensor};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{encode_f32, ensure_dir, read_f32, read_json, sha256_bytes, write_json};
use crate::layers::classifier::{ClassifierArch, LogitClassifier};
use crate::layers::simulator::{CoupledSimulator, SimulatorArch};

pub const DESCRIPTOR: &str = "architecture.json";
pub const PARAMS: &str = "params.bin";
const FORMAT: &str = "cfsim-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub buffer: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Descriptor<A> {
    pub format: String,
    pub kind: String,
    pub architecture: A,
    pub tensors: Vec<TensorEntry>,
    pub params_sha256: String,
}

/// Writes a checkpoint and returns the parameter hash.
pub fn save_store<A: Serialize>(dir: &Path, kind: &str, arch: &A, store: &ParamStore<f32>) -> Result<String> {
    ensure_dir(dir)?;
    let mut flat = Vec::new();
    let mut tensors = Vec::new();
    for (_, p) in store.iter() {
        flat.extend_from_slice(p.value.data());
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            buffer: p.kind == ParamKind::Buffer,
        });
    }
    let bytes = encode_f32(&flat);
    let hash = sha256_bytes(&bytes);
    let path = dir.join(PARAMS);
    std::fs::write(&path, &bytes).map_err(|source| Error::Io { path, source })?;
    write_json(
        &dir.join(DESCRIPTOR),
        &Descriptor {
            format: FORMAT.into(),
            kind: kind.into(),
            architecture: arch,
            tensors,
            params_sha256: hash.clone(),
        },
    )?;
    Ok(hash)
}

/// Reads a checkpoint written by [`save_store`], verifying the hash.
pub fn load_store<A: DeserializeOwned>(dir: &Path, kind: &str) -> Result<(A, ParamStore<f32>, String)> {
    let desc: Descriptor<A> = read_json(&dir.join(DESCRIPTOR))?;
    if desc.format != FORMAT || desc.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{} holds `{}` ({}), expected `{kind}` ({FORMAT})",
            dir.display(),
            desc.kind,
            desc.format
        )));
    }
    let path = dir.join(PARAMS);
    let bytes = std::fs::read(&path).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;
    let found = sha256_bytes(&bytes);
    if found != desc.params_sha256 {
        return Err(Error::HashMismatch {
            path,
            expected: desc.params_sha256,
            found,
        });
    }
    let total = desc.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let flat = read_f32(&path, Some(total))?;
    let mut store = ParamStore::new();
    let mut at = 0;
    for t in &desc.tensors {
        let len: usize = t.shape.iter().product();
        let value = Tensor::new(t.shape.clone(), flat[at..at + len].to_vec())?;
        let kind = if t.buffer { ParamKind::Buffer } else { ParamKind::Trainable };
        store.add(t.name.clone(), value, kind)?;
        at += len;
    }
    Ok((desc.architecture, store, found))
}

impl LogitClassifier<f32> {
    pub fn save(&self, dir: &Path) -> Result<String> {
        save_store(dir, "classifier", &self.arch, &self.store)
    }

    /// Loads a classifier; loaded classifiers are frozen.
    pub fn load(dir: &Path) -> Result<(Self, String)> {
        let (arch, store, hash) = load_store::<ClassifierArch>(dir, "classifier")?;
        let mut c = Self::from_store(arch, store)?;
        c.freeze();
        Ok((c, hash))
    }
}

impl CoupledSimulator<f32> {
    pub fn save(&self, dir: &Path) -> Result<String> {
        save_store(dir, "simulator", &self.arch, &self.store)
    }

    pub fn load(dir: &Path) -> Result<(Self, String)> {
        let (arch, store, hash) = load_store::<SimulatorArch>(dir, "simulator")?;
        Ok((Self::from_store(arch, store)?, hash))
    }
}
