//! `NETW1` weight files.
//!
//! Layout: ASCII `NETW1`, little-endian `u32` manifest length, a UTF-8 JSON manifest
//! `{spec, tensors: [{name, shape, offset}]}`, then the tensors as little-endian
//! `f32` values concatenated in table order. `offset` is the byte offset of a tensor
//! inside the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic};
use crate::network::{LayerParams, NetworkSpec, SplitModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"NETW1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightManifest {
    pub spec: NetworkSpec,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes the model to `NETW1` bytes.
pub fn to_bytes(model: &SplitModel) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (i, p) in model.params().iter().enumerate() {
        let Some(p) = p else { continue };
        for (suffix, t) in [("weight", &p.weight), ("bias", &p.bias)] {
            tensors.push(TensorEntry {
                name: format!("layer{i}.{suffix}"),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let manifest = WeightManifest {
        spec: model.spec().clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(9 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

/// Parses and validates `NETW1` bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<SplitModel> {
    if bytes.len() < 9 || &bytes[..5] != MAGIC {
        return Err(Error::BadMagic {
            expected: "NETW1".into(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(5)]).into_owned(),
        });
    }
    let mlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    if 9 + mlen > bytes.len() {
        return Err(Error::LengthMismatch(format!(
            "manifest declares {mlen} bytes, file has {}",
            bytes.len() - 9
        )));
    }
    let manifest: WeightManifest = serde_json::from_slice(&bytes[9..9 + mlen])?;
    let payload = &bytes[9 + mlen..];
    let spec = manifest.spec;
    spec.layer_shapes()?;

    let mut expected = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        if let Some((w, b)) = layer.param_shapes() {
            expected.push((format!("layer{i}.weight"), w));
            expected.push((format!("layer{i}.bias"), b));
        }
    }
    if expected.len() != manifest.tensors.len() {
        return Err(Error::LengthMismatch(format!(
            "spec needs {} tensors, table lists {}",
            expected.len(),
            manifest.tensors.len()
        )));
    }
    let mut offset = 0;
    for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: entry.shape.clone(),
                found: shape.clone(),
            });
        }
        if entry.offset != offset {
            return Err(Error::LengthMismatch(format!(
                "tensor {name} at offset {}, expected {offset}",
                entry.offset
            )));
        }
        offset += 4 * shape.iter().product::<usize>();
    }
    if payload.len() != offset {
        return Err(Error::LengthMismatch(format!(
            "payload has {} bytes, table needs {offset}",
            payload.len()
        )));
    }

    let mut tensors = expected.into_iter().zip(&manifest.tensors).map(|((_, shape), e)| {
        let n: usize = shape.iter().product();
        let data = payload[e.offset..e.offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape, data)
    });
    let mut params = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        params.push(match layer.param_shapes() {
            Some(_) => Some(LayerParams {
                weight: tensors.next().expect("counted")?,
                bias: tensors.next().expect("counted")?,
            }),
            None => None,
        });
    }
    SplitModel::from_params(spec, params)
}

pub fn save_weights(model: &SplitModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &to_bytes(model))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<SplitModel> {
    from_bytes(&read_file(path.as_ref())?)
}

/// SHA-256 (hex) of the model's `NETW1` serialization.
pub fn model_hash(model: &SplitModel) -> String {
    hex::encode(Sha256::digest(to_bytes(model)))
}
