//! Binary checkpoint format.
//!
//! ```text
//! "CTCP"  u32 version  u64 meta_len  meta (JSON)  u64 blob_len  blob  u32 crc32(blob)
//! ```
//!
//! All integers are little-endian. The blob holds every manifest entry as
//! little-endian `f32` in manifest order: model parameters first, then the
//! optimiser moments if present.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::text::{build_prompts, Vocab};
use crate::model::Model;
use crate::nn::ParamKind;
use crate::tensor::{Real, Tensor};
use crate::train::OptimizerState;

pub const MAGIC: &[u8; 4] = b"CTCP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub kind: ParamKind,
    pub section: Section,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub run: RunConfig,
    pub class_names: Vec<String>,
    pub vocab: Vec<String>,
    pub seed: u64,
    pub manifest: Vec<ManifestEntry>,
    pub optimizer_step: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real> {
    pub run: RunConfig,
    pub model: Model<T>,
    pub optimizer: Option<OptimizerState<T>>,
}

fn push_f32<T: Real>(blob: &mut Vec<u8>, t: &Tensor<T>) {
    for v in t.data() {
        blob.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
}

pub fn encode_checkpoint<T: Real>(model: &Model<T>, optimizer: Option<&OptimizerState<T>>, run: &RunConfig) -> Result<Vec<u8>> {
    let mut manifest = Vec::new();
    let mut blob = Vec::new();
    let entry = |name: &str, t: &Tensor<T>, kind, section| ManifestEntry {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        dtype: "f32".into(),
        kind,
        section,
    };
    for e in model.params.entries() {
        manifest.push(entry(&e.name, &e.value, e.kind, Section::Param));
        push_f32(&mut blob, &e.value);
    }
    if let Some(opt) = optimizer {
        if opt.m.len() != model.params.len() {
            return Err(Error::State("optimiser state does not match the model".into()));
        }
        for (section, moments) in [(Section::AdamM, &opt.m), (Section::AdamV, &opt.v)] {
            for (e, t) in model.params.entries().iter().zip(moments) {
                if let Some(t) = t {
                    manifest.push(entry(&e.name, t, e.kind, section));
                    push_f32(&mut blob, t);
                }
            }
        }
    }
    let meta = Metadata {
        run: run.clone(),
        class_names: model.class_names().to_vec(),
        vocab: model.vocab.tokens().to_vec(),
        seed: model.seed,
        manifest,
        optimizer_step: optimizer.map(|o| o.step),
    };
    let meta = serde_json::to_vec(&meta).map_err(|e| Error::Format(format!("cannot encode metadata: {e}")))?;
    let mut out = Vec::with_capacity(24 + meta.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(&blob);
    out.extend_from_slice(&crc32fast::hash(&blob).to_le_bytes());
    Ok(out)
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    model: &Model<T>,
    optimizer: Option<&OptimizerState<T>>,
    run: &RunConfig,
) -> Result<()> {
    let bytes = encode_checkpoint(model, optimizer, run)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("length check failed: file ends inside the {what} ({} bytes)", self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format(format!("{what} length {v} too large")))
    }
}

/// Parses and validates the container; returns the metadata and the blob.
pub fn decode_container(bytes: &[u8]) -> Result<(Metadata, &[u8])> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("magic check failed: not a CTCP checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("version check failed: unsupported checkpoint version {version}")));
    }
    let meta_len = r.u64("metadata length")?;
    let meta = r.take(meta_len, "metadata")?;
    let blob_len = r.u64("blob length")?;
    let blob = r.take(blob_len, "parameter blob")?;
    let crc = r.u32("checksum")?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("length check failed: {} trailing bytes", bytes.len() - r.pos)));
    }
    if crc32fast::hash(blob) != crc {
        return Err(Error::Format("CRC check failed: parameter blob is corrupt".into()));
    }
    let meta: Metadata =
        serde_json::from_slice(meta).map_err(|e| Error::Format(format!("metadata check failed: {e}")))?;
    let expected: usize = meta.manifest.iter().map(|m| m.shape.iter().product::<usize>() * 4).sum();
    if expected != blob.len() {
        return Err(Error::Format(format!(
            "length check failed: manifest describes {expected} bytes, blob has {}",
            blob.len()
        )));
    }
    Ok((meta, blob))
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (meta, blob) = decode_container(bytes)?;
    let prompts = build_prompts(&meta.class_names, &meta.run.model.template)?;
    let vocab = Vocab::from_tokens(meta.vocab.clone());
    let mut model = Model::<T>::with_vocab(&meta.run.model, &meta.run.toggles, prompts, vocab, meta.seed)?;
    let mut optimizer = meta.optimizer_step.map(|step| {
        let mut s = OptimizerState::new(&model.params);
        s.step = step;
        s
    });
    let mut at = 0;
    let mut seen = vec![false; model.params.len()];
    for m in &meta.manifest {
        let n: usize = m.shape.iter().product();
        let values: Vec<T> = blob[at..at + 4 * n]
            .chunks_exact(4)
            .map(|b| T::c(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect();
        at += 4 * n;
        let id = model
            .params
            .find(&m.name)
            .ok_or_else(|| Error::Format(format!("checkpoint parameter '{}' is not part of the model", m.name)))?;
        if model.params.value(id).shape() != m.shape.as_slice() {
            return Err(Error::Format(format!(
                "'{}' has shape {:?} in the checkpoint but {:?} in the model",
                m.name,
                m.shape,
                model.params.value(id).shape()
            )));
        }
        let tensor = Tensor::new(&m.shape, values)?;
        match m.section {
            Section::Param => {
                model.params.set_kind(id, m.kind);
                *model.params.value_mut(id) = tensor;
                seen[id.index()] = true;
            }
            Section::AdamM | Section::AdamV => {
                let opt = optimizer
                    .as_mut()
                    .ok_or_else(|| Error::Format("optimiser moments without an optimiser step".into()))?;
                let slot = if m.section == Section::AdamM { &mut opt.m } else { &mut opt.v };
                slot[id.index()] = Some(tensor);
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Format(format!("checkpoint lacks parameter '{}'", model.params.entries()[i].name)));
    }
    Ok(Checkpoint { run: meta.run, model, optimizer })
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
