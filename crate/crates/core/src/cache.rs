//! Per-sample attack cache and its `AICH1` file format.
//!
//! Layout: ASCII `AICH1`, little-endian `u32` manifest length, UTF-8 JSON
//! [`CacheManifest`], then one block per sample holding `x, x′, h, h′, z, z′` as
//! little-endian `f32`, followed by one success byte per sample.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, sample_seed, AttackConfig, AttackKind, AttackResult};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic};
use crate::network::SplitModel;
use crate::tensor::{argmax, Tensor};
use crate::weights::model_hash;

pub const MAGIC: &[u8; 5] = b"AICH1";

/// Samples attacked together inside one parallel task.
const CHUNK: usize = 16;
/// Other-class dataset samples offered as anchors to the decision attack.
const ANCHOR_CANDIDATES: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackFailure {
    pub index: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    /// Position in the attacked dataset.
    pub index: usize,
    pub label: usize,
    /// Byte offset of the sample block inside the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub attack: AttackConfig,
    pub model_hash: String,
    pub sample_count: usize,
    pub input_shape: Vec<usize>,
    pub split_shape: Vec<usize>,
    pub num_classes: usize,
    pub samples: Vec<SampleEntry>,
    pub failures: Vec<AttackFailure>,
}

/// Clean and adversarial inputs, split activations and logits for each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackCache {
    pub attack: AttackConfig,
    pub model_hash: String,
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub x: Tensor,
    pub x_adv: Tensor,
    pub h: Tensor,
    pub h_adv: Tensor,
    pub z: Tensor,
    pub z_adv: Tensor,
    pub success: Vec<bool>,
    pub failures: Vec<AttackFailure>,
}

impl AttackCache {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn success_rate(&self) -> f64 {
        self.success.iter().filter(|&&s| s).count() as f64 / self.len().max(1) as f64
    }

    /// Cache rows entering intervention metrics: successful attacks, or all rows.
    pub fn admitted(&self, include_failed: bool) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| include_failed || self.success[i])
            .collect()
    }

    /// Keeps rows `rows` in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let keep: std::collections::BTreeSet<usize> = rows.iter().map(|&r| self.indices[r]).collect();
        Self {
            attack: self.attack.clone(),
            model_hash: self.model_hash.clone(),
            indices: rows.iter().map(|&r| self.indices[r]).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            x: self.x.select(rows),
            x_adv: self.x_adv.select(rows),
            h: self.h.select(rows),
            h_adv: self.h_adv.select(rows),
            z: self.z.select(rows),
            z_adv: self.z_adv.select(rows),
            success: rows.iter().map(|&r| self.success[r]).collect(),
            failures: self
                .failures
                .iter()
                .filter(|f| keep.contains(&f.index))
                .cloned()
                .collect(),
        }
    }

    pub fn check_model(&self, model: &SplitModel) -> Result<()> {
        let current = model_hash(model);
        if current != self.model_hash {
            return Err(Error::StaleCache {
                cache: self.model_hash.clone(),
                model: current,
            });
        }
        Ok(())
    }

    /// Per-sample ‖η‖₂.
    pub fn perturbation_norms(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                self.x_adv
                    .item(i)
                    .iter()
                    .zip(self.x.item(i))
                    .map(|(&a, &b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let block: usize = [&self.x, &self.x_adv, &self.h, &self.h_adv, &self.z, &self.z_adv]
            .iter()
            .map(|t| t.item_len() * 4)
            .sum();
        let manifest = CacheManifest {
            attack: self.attack.clone(),
            model_hash: self.model_hash.clone(),
            sample_count: self.len(),
            input_shape: self.x.shape()[1..].to_vec(),
            split_shape: self.h.shape()[1..].to_vec(),
            num_classes: self.z.item_len(),
            samples: (0..self.len())
                .map(|i| SampleEntry {
                    index: self.indices[i],
                    label: self.labels[i],
                    offset: i * block,
                })
                .collect(),
            failures: self.failures.clone(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(9 + json.len() + self.len() * (block + 1));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for i in 0..self.len() {
            for t in [&self.x, &self.x_adv, &self.h, &self.h_adv, &self.z, &self.z_adv] {
                for v in t.item(i) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out.extend(self.success.iter().map(|&s| u8::from(s)));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..5] != MAGIC {
            return Err(Error::BadMagic {
                expected: "AICH1".into(),
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
        let m: CacheManifest = serde_json::from_slice(&bytes[9..9 + mlen])?;
        let payload = &bytes[9 + mlen..];
        let n = m.sample_count;
        if m.samples.len() != n || n == 0 {
            return Err(Error::LengthMismatch(format!(
                "{} sample entries for sample_count {n}",
                m.samples.len()
            )));
        }
        let in_len: usize = m.input_shape.iter().product();
        let h_len: usize = m.split_shape.iter().product();
        let lens = [in_len, in_len, h_len, h_len, m.num_classes, m.num_classes];
        let block = lens.iter().sum::<usize>() * 4;
        if payload.len() != n * block + n {
            return Err(Error::LengthMismatch(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                n * block + n
            )));
        }
        let mut bufs: Vec<Vec<f32>> = lens.iter().map(|l| Vec::with_capacity(l * n)).collect();
        for (i, s) in m.samples.iter().enumerate() {
            if s.offset != i * block {
                return Err(Error::LengthMismatch(format!(
                    "sample {i} at offset {}, expected {}",
                    s.offset,
                    i * block
                )));
            }
            let mut pos = s.offset;
            for (buf, &l) in bufs.iter_mut().zip(&lens) {
                buf.extend(
                    payload[pos..pos + 4 * l]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))),
                );
                pos += 4 * l;
            }
        }
        let success = payload[n * block..]
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::LengthMismatch(format!("success byte {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let shaped = |dims: &[usize], data: Vec<f32>| {
            let mut shape = vec![n];
            shape.extend_from_slice(dims);
            Tensor::new(shape, data)
        };
        let mut it = bufs.into_iter();
        let mut next = |dims: &[usize]| shaped(dims, it.next().expect("six buffers"));
        let classes = [m.num_classes];
        Ok(Self {
            x: next(&m.input_shape)?,
            x_adv: next(&m.input_shape)?,
            h: next(&m.split_shape)?,
            h_adv: next(&m.split_shape)?,
            z: next(&classes)?,
            z_adv: next(&classes)?,
            attack: m.attack,
            model_hash: m.model_hash,
            indices: m.samples.iter().map(|s| s.index).collect(),
            labels: m.samples.iter().map(|s| s.label).collect(),
            success,
            failures: m.failures,
        })
    }
}

pub fn save_cache(cache: &AttackCache, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &cache.to_bytes())
}

pub fn load_cache(path: impl AsRef<Path>) -> Result<AttackCache> {
    let path = path.as_ref();
    AttackCache::from_bytes(&read_file(path)?).map_err(|e| match e {
        Error::Json(j) => Error::Malformed {
            path: path.to_path_buf(),
            reason: j.to_string(),
        },
        other => other,
    })
}

/// Runs one attack on samples `start..end` of `dataset`.
fn attack_chunk(
    model: &SplitModel,
    dataset: &Dataset,
    config: &AttackConfig,
    start: usize,
    end: usize,
) -> Result<(AttackResult, Vec<AttackFailure>)> {
    let x = dataset.images.slice_batch(start, end);
    let y = &dataset.labels[start..end];
    let ids: Vec<u64> = (start as u64..end as u64).collect();
    match config.kind {
        AttackKind::Fgsm => Ok((attacks::fgsm(model, &x, y, config.epsilon)?, Vec::new())),
        AttackKind::PgdLinf => Ok((attacks::pgd_linf(model, &x, y, config, &ids)?, Vec::new())),
        AttackKind::L2Penalty => Ok((attacks::l2_penalty_attack(model, &x, y, config)?, Vec::new())),
        AttackKind::DecisionBoundary => {
            let mut x_adv = x.clone();
            let mut work = Vec::new();
            let mut failures = Vec::new();
            for (off, i) in (start..end).enumerate() {
                let anchors = anchor_candidates(dataset, i, config.seed);
                let xi = dataset.images.slice_batch(i, i + 1);
                match attacks::decision_boundary_attack(
                    model,
                    &xi,
                    &dataset.labels[i..=i],
                    config,
                    &[i as u64],
                    &anchors,
                ) {
                    Ok(r) => {
                        x_adv.item_mut(off).copy_from_slice(r.x_adv.data());
                        work.push(r.work[0]);
                    }
                    Err(e) => {
                        failures.push(AttackFailure {
                            index: i,
                            error: e.to_string(),
                        });
                        work.push(0);
                    }
                }
            }
            let clean = model.predict(&x)?;
            let adv = model.predict(&x_adv)?;
            let eta = x_adv.zip_map(&x, |a, b| a - b)?;
            Ok((
                AttackResult {
                    success: clean.iter().zip(&adv).map(|(a, b)| a != b).collect(),
                    x_adv,
                    eta,
                    work,
                },
                failures,
            ))
        }
    }
}

/// Seeded choice of other-class samples for sample `i`.
fn anchor_candidates(dataset: &Dataset, i: usize, seed: u64) -> Vec<&[f32]> {
    let others: Vec<usize> = (0..dataset.len())
        .filter(|&j| dataset.labels[j] != dataset.labels[i])
        .collect();
    if others.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, i as u64, 1));
    (0..ANCHOR_CANDIDATES.min(others.len()))
        .map(|_| dataset.images.item(others[rng.random_range(0..others.len())]))
        .collect()
}

/// Attacks every sample of `dataset` (expected to be correctly classified) and
/// records split activations and logits. Rows keep dataset order.
pub fn build_attack_cache(model: &SplitModel, dataset: &Dataset, config: &AttackConfig) -> Result<AttackCache> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset(dataset.name.clone()));
    }
    let n = dataset.len();
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    type Part = (AttackResult, Vec<AttackFailure>, Tensor, Tensor, Tensor, Tensor);
    let parts: Vec<Part> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + CHUNK).min(n);
            let (r, failures) = attack_chunk(model, dataset, config, s, e)?;
            let x = dataset.images.slice_batch(s, e);
            let h = model.forward_to_split(&x)?;
            let h_adv = model.forward_to_split(&r.x_adv)?;
            let z = model.forward_from_split(&h)?;
            let z_adv = model.forward_from_split(&h_adv)?;
            Ok((r, failures, h, h_adv, z, z_adv))
        })
        .collect::<Result<_>>()?;

    let concat = |f: &dyn Fn(&Part) -> &Tensor| -> Result<Tensor> {
        let first = f(&parts[0]);
        let mut shape = first.shape().to_vec();
        shape[0] = n;
        let mut data = Vec::with_capacity(first.item_len() * n);
        for p in &parts {
            data.extend_from_slice(f(p).data());
        }
        Tensor::new(shape, data)
    };
    let z = concat(&|p| &p.4)?;
    let z_adv = concat(&|p| &p.5)?;
    let success = (0..n).map(|i| argmax(z.item(i)) != argmax(z_adv.item(i))).collect();
    Ok(AttackCache {
        attack: config.clone(),
        model_hash: model_hash(model),
        indices: (0..n).collect(),
        labels: dataset.labels.clone(),
        x: dataset.images.clone(),
        x_adv: concat(&|p| &p.0.x_adv)?,
        h: concat(&|p| &p.2)?,
        h_adv: concat(&|p| &p.3)?,
        z,
        z_adv,
        success,
        failures: parts.iter().flat_map(|p| p.1.iter().cloned()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;
    use crate::network::{LayerSpec, NetworkSpec};

    fn tiny() -> (SplitModel, Dataset) {
        let spec = NetworkSpec {
            input_shape: vec![1, 4, 4],
            layers: vec![
                LayerSpec::conv(1, 3, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::conv(3, 4, 2, 2, 0),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::dense(16, 2),
            ],
            split_index: 0,
            num_classes: 2,
            split_after_activation: false,
        };
        let ds = synth_generate(4, 10, &[1, 4, 4], &[vec![0.3; 16], vec![0.7; 16]], 0.1).unwrap();
        (SplitModel::init(spec, 2).unwrap(), ds)
    }

    #[test]
    fn zero_epsilon_keeps_activations() {
        let (m, ds) = tiny();
        let c = build_attack_cache(&m, &ds, &AttackConfig::fgsm(0.0)).unwrap();
        assert_eq!(c.h, c.h_adv);
        assert_eq!(c.z, c.z_adv);
        assert!(c.success.iter().all(|&s| !s));
        assert_eq!(c.len(), 20);
    }

    #[test]
    fn bytes_round_trip() {
        let (m, ds) = tiny();
        let c = build_attack_cache(&m, &ds, &AttackConfig::pgd(0.2, 3, 1, 4)).unwrap();
        let back = AttackCache::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        let mut bad = c.to_bytes();
        bad.pop();
        assert!(matches!(AttackCache::from_bytes(&bad), Err(Error::LengthMismatch(_))));
        bad[0] = b'X';
        assert!(matches!(AttackCache::from_bytes(&bad), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn stale_model_is_detected() {
        let (m, ds) = tiny();
        let c = build_attack_cache(&m, &ds, &AttackConfig::fgsm(0.1)).unwrap();
        assert!(c.check_model(&m).is_ok());
        let other = SplitModel::init(m.spec().clone(), 3).unwrap();
        assert!(matches!(c.check_model(&other), Err(Error::StaleCache { .. })));
    }
}
