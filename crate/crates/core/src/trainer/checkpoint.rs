//! Binary checkpoint: magic, format version, a JSON header describing the
//! model, then every parameter value as little-endian f64 in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::TrainConfig;
use crate::corpus::{RelationDef, RelationSchema};
use crate::encoder::Vocabulary;
use crate::error::{io_err, Error, Result};
use crate::model::{DocReModel, ModelConfig};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"DOCRECKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Decision threshold tuned on the development split.
    pub threshold: Option<f64>,
    pub vocab_hash: String,
    pub vocab: String,
    pub relations: Vec<RelationDef>,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint<S: Scalar>(
    path: impl AsRef<Path>,
    model: &DocReModel<S>,
    train: &TrainConfig,
    threshold: Option<f64>,
) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        dtype: S::DTYPE.to_string(),
        model: model.config().clone(),
        train: train.clone(),
        threshold,
        vocab_hash: model.vocab().hash(),
        vocab: model.vocab().to_text(),
        relations: model.schema().relations().to_vec(),
        params: model
            .store()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(24 + json.len() + 8 * model.store().num_values());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in model.store().iter() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(io_err(path))
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint("file is truncated".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

/// Rebuilds the model and restores its parameters. Fails on a wrong format,
/// a vocabulary whose hash disagrees, or parameters that do not match the
/// architecture described by the header.
pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<(DocReModel<S>, CheckpointHeader)> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(io_err(path))?;
    let mut bytes = &data[..];
    if take(&mut bytes, 8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().expect("8 bytes")) as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(take(&mut bytes, len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let vocab = Vocabulary::from_text(&header.vocab)?;
    if vocab.hash() != header.vocab_hash {
        return Err(Error::Checkpoint("vocabulary hash mismatch".into()));
    }
    let schema = RelationSchema::new(header.relations.clone())?;
    let mut model = DocReModel::new(header.model.clone(), vocab, schema)?;
    if model.store().len() != header.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            header.params.len(),
            model.store().len()
        )));
    }
    for (p, e) in model.store_mut().iter_mut().zip(&header.params) {
        if p.name != e.name || p.value.shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {} {:?} does not match {} {:?}",
                e.name,
                e.shape,
                p.name,
                p.value.shape()
            )));
        }
        let raw = take(&mut bytes, 8 * p.value.len())?;
        for (v, b) in p.value.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *v = S::lit(f64::from_le_bytes(b.try_into().expect("8 bytes")));
        }
    }
    if !bytes.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after parameter data".into()));
    }
    Ok((model, header))
}
