//! Versioned binary container for a model, its prototypes and run
//! metadata.
//!
//! Layout: the magic bytes `PRFCTCKP`, a little-endian `u32` version, a
//! little-endian `u64` header length, the JSON header, then every tensor's
//! values as little-endian `f64` in header order. Values round-trip
//! bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::PrototypeBank;
use crate::model::{Model, ModelConfig};
use crate::params::{ParamRole, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PRFCTCKP";
pub const VERSION: u32 = 1;

/// Name of the prototype tensor inside the container.
pub const PROTOTYPES: &str = "prototypes";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    role: Option<ParamRole>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    /// Absent for a bare tensor store.
    #[serde(default)]
    config: Option<ModelConfig>,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    prototype_counts: Option<Vec<usize>>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// Contents of a checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub prototypes: Option<PrototypeBank>,
    pub metadata: serde_json::Value,
}

pub fn to_bytes(
    model: &Model,
    prototypes: Option<&PrototypeBank>,
    metadata: &serde_json::Value,
) -> Result<Vec<u8>> {
    encode(Some(model.config()), model.params(), prototypes, metadata)
}

/// Serializes a bare tensor store, such as a pretrained backbone.
pub fn store_to_bytes(params: &ParamStore, metadata: &serde_json::Value) -> Result<Vec<u8>> {
    encode(None, params, None, metadata)
}

fn encode(
    config: Option<&ModelConfig>,
    params: &ParamStore,
    prototypes: Option<&PrototypeBank>,
    metadata: &serde_json::Value,
) -> Result<Vec<u8>> {
    let mut tensors: Vec<(TensorEntry, &[f64])> = params
        .iter()
        .map(|(name, p)| {
            (
                TensorEntry {
                    name: name.to_string(),
                    shape: p.tensor.shape().to_vec(),
                    role: Some(p.role),
                    trainable: p.trainable,
                },
                p.tensor.data(),
            )
        })
        .collect();
    if let Some(bank) = prototypes {
        tensors.push((
            TensorEntry {
                name: PROTOTYPES.into(),
                shape: vec![bank.mask_count, bank.num_classes, bank.hidden],
                role: None,
                trainable: false,
            },
            &bank.centroids,
        ));
    }
    let data: Vec<&[f64]> = tensors.iter().map(|(_, d)| *d).collect();
    let header = Header {
        config: config.cloned(),
        tensors: tensors.into_iter().map(|(e, _)| e).collect(),
        prototype_counts: prototypes.map(|b| b.counts.clone()),
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let payload: usize = data.iter().map(|d| d.len() * 8).sum();
    let mut out = Vec::with_capacity(20 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for d in data {
        for v in d {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format("unexpected end of file".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, params, prototypes) = decode(bytes)?;
    let config = header
        .config
        .ok_or_else(|| Error::Format("file holds tensors but no model".into()))?;
    Ok(Checkpoint {
        model: Model::from_parts(config, params)?,
        prototypes,
        metadata: header.metadata,
    })
}

/// Reads a store written by [`store_to_bytes`] (or the tensors of a full
/// checkpoint) with its metadata.
pub fn store_from_bytes(bytes: &[u8]) -> Result<(ParamStore, serde_json::Value)> {
    let (header, params, _) = decode(bytes)?;
    Ok((params, header.metadata))
}

fn decode(mut bytes: &[u8]) -> Result<(Header, ParamStore, Option<PrototypeBank>)> {
    if take(&mut bytes, 8)? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(&mut bytes, len)?)?;

    let mut params = ParamStore::new();
    let mut prototypes = None;
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = take(
            &mut bytes,
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data)?;
        match entry.role {
            Some(role) => {
                params.insert(&entry.name, tensor, role)?;
                params.get_mut(&entry.name)?.trainable = entry.trainable;
            }
            None if entry.name == PROTOTYPES => {
                let counts = header
                    .prototype_counts
                    .clone()
                    .ok_or_else(|| Error::Format("prototypes without counts".into()))?;
                prototypes = Some(PrototypeBank::from_tensor(&tensor, counts)?);
            }
            None => return Err(Error::Format(format!("tensor {} has no role", entry.name))),
        }
    }
    if !bytes.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len())));
    }
    Ok((header, params, prototypes))
}

pub fn save(
    path: &Path,
    model: &Model,
    prototypes: Option<&PrototypeBank>,
    metadata: &serde_json::Value,
) -> Result<()> {
    fs::write(path, to_bytes(model, prototypes, metadata)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}
