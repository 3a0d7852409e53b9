//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `VPBC` |
//! | 2 | format version |
//! | 2 | reserved, zero |
//! | 8 | header length `h` |
//! | h | JSON header |
//! | … | tensor values (f64), then Adam moments `m`, `v` per entry |
//! | 32 | SHA-256 of everything above |

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vpbsd_tensor::{Adam, AdamConfig, Moments, ParamSet, Tensor};

use super::config::{hex, Stage};
use crate::error::{Error, Result};
use crate::networks::{StudentConfig, TeacherConfig};

pub const MAGIC: &[u8; 4] = b"VPBC";
pub const VERSION: u16 = 1;
const PREFIX: usize = 16;
const DIGEST: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookShape {
    pub size: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub kind: ModelKind,
    pub teacher: Option<TeacherConfig>,
    pub student: Option<StudentConfig>,
    pub codebook: Option<CodebookShape>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookState {
    pub usage: Vec<u64>,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: f64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub architecture: Architecture,
    pub stage: Stage,
    pub epochs_done: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Hash of the checkpoint this one was derived from.
    pub parent: Option<String>,
    pub codebook: Option<CodebookState>,
    pub optimizer: Option<OptimizerState>,
    pub tensors: Vec<TensorEntry>,
    /// Parameters with Adam moments, in stored order.
    pub moments: Vec<String>,
}

/// Parameters, codebook statistics, optimizer state and provenance of one
/// model after one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
    pub moments: BTreeMap<String, Moments>,
}

impl ModelCheckpoint {
    pub fn new(
        architecture: Architecture,
        stage: Stage,
        epochs_done: usize,
        seed: u64,
        config_hash: String,
        sets: &[&ParamSet],
    ) -> Self {
        let tensors: Vec<(String, Tensor)> = sets
            .iter()
            .flat_map(|s| {
                s.iter().map(|(n, t)| {
                    (
                        n.to_string(),
                        Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid"),
                    )
                })
            })
            .collect();
        let header = CheckpointHeader {
            architecture,
            stage,
            epochs_done,
            seed,
            config_hash,
            parent: None,
            codebook: None,
            optimizer: None,
            tensors: tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            moments: Vec::new(),
        };
        Self {
            header,
            tensors,
            moments: BTreeMap::new(),
        }
    }

    pub fn with_optimizer(mut self, adam: &Adam) -> Self {
        let c = adam.config();
        self.header.optimizer = Some(OptimizerState {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            decay: c.decay,
            step: adam.steps(),
        });
        self.moments = adam.moments().clone();
        self.header.moments = self.moments.keys().cloned().collect();
        self
    }

    pub fn optimizer(&self) -> Result<Option<Adam>> {
        let Some(o) = self.header.optimizer else {
            return Ok(None);
        };
        let cfg = AdamConfig {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            decay: o.decay,
        };
        Ok(Some(Adam::restore(cfg, o.step, self.moments.clone())?))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies stored values into every parameter of `set`; shapes must agree.
    pub fn restore_into(&self, set: &mut ParamSet) -> Result<()> {
        let names: Vec<String> = set.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let stored = self
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter {name}")))?;
            let id = set.id(&name).expect("listed");
            if set.get(id).shape() != stored.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: stored shape {:?}, model expects {:?}",
                    stored.shape(),
                    set.get(id).shape()
                )));
            }
            set.assign(&name, stored.data())?;
        }
        Ok(())
    }

    pub fn require_architecture(&self, expected: &Architecture) -> Result<()> {
        if &self.header.architecture != expected {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint has {:?}, expected {:?}",
                self.header.architecture, expected
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX + header.len() + DIGEST);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            t.data()
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        for name in &self.header.moments {
            let m = &self.moments[name];
            m.m.iter()
                .chain(&m.v)
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: String| Error::Checkpoint(m);
        if bytes.len() < PREFIX + DIGEST {
            return Err(fmt(format!(
                "truncated checkpoint of {} bytes",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt("not a checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(fmt(format!(
                "unsupported checkpoint version {version}, this build reads {VERSION}"
            )));
        }
        if bytes[6..8] != [0, 0] {
            return Err(fmt("reserved bytes are not zero".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST);
        if Sha256::digest(body).as_slice() != digest {
            return Err(fmt("checksum mismatch: file is corrupted".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let hend = usize::try_from(hlen)
            .ok()
            .and_then(|h| PREFIX.checked_add(h))
            .filter(|&e| e <= body.len())
            .ok_or_else(|| fmt(format!("header length {hlen} exceeds file")))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&body[PREFIX..hend]).map_err(|e| fmt(format!("header: {e}")))?;
        let mut cursor = Reader {
            data: &body[hend..],
            pos: 0,
        };
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut sizes = BTreeMap::new();
        for e in &header.tensors {
            let n = e
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| fmt(format!("tensor {} shape overflows", e.name)))?;
            let data = cursor
                .take(n)
                .ok_or_else(|| fmt(format!("truncated data for tensor {}", e.name)))?;
            if sizes.insert(e.name.clone(), n).is_some() {
                return Err(fmt(format!("duplicate tensor {}", e.name)));
            }
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        let mut moments = BTreeMap::new();
        for name in &header.moments {
            let n = *sizes
                .get(name)
                .ok_or_else(|| fmt(format!("moments for unknown tensor {name}")))?;
            let m = cursor
                .take(n)
                .ok_or_else(|| fmt(format!("truncated moments for {name}")))?;
            let v = cursor
                .take(n)
                .ok_or_else(|| fmt(format!("truncated moments for {name}")))?;
            if moments.insert(name.clone(), Moments { m, v }).is_some() {
                return Err(fmt(format!("duplicate moments for {name}")));
            }
        }
        if cursor.pos != cursor.data.len() {
            return Err(fmt(format!(
                "{} unexpected trailing bytes",
                cursor.data.len() - cursor.pos
            )));
        }
        let sorted: Vec<&String> = moments.keys().collect();
        if sorted.iter().copied().ne(header.moments.iter()) {
            return Err(fmt("moment entries are not in canonical order".into()));
        }
        if tensors.iter().any(|(_, t)| !t.is_finite()) {
            return Err(fmt("non-finite parameter values".into()));
        }
        Ok(Self {
            header,
            tensors,
            moments,
        })
    }

    /// Hex SHA-256 of the encoded checkpoint.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.encode()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        let bytes = self.encode();
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(hex(&Sha256::digest(&bytes)))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Hex SHA-256 over names, shapes and values of parameter sets.
pub fn param_hash(sets: &[&ParamSet]) -> String {
    let mut h = Sha256::new();
    for s in sets {
        for (name, t) in s.iter() {
            h.update(name.as_bytes());
            t.shape()
                .iter()
                .for_each(|d| h.update((*d as u64).to_le_bytes()));
            t.data().iter().for_each(|v| h.update(v.to_le_bytes()));
        }
    }
    hex(&h.finalize())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<Vec<f64>> {
        let len = n.checked_mul(8)?;
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.data.len())?;
        let out = self.data[self.pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        self.pos = end;
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelCheckpoint {
        let mut ps = ParamSet::new();
        ps.insert(
            "a.w",
            Tensor::new([2, 3], vec![1.0, -2.5, 3.25, 0.1, 1e-300, -0.0]).unwrap(),
        );
        ps.insert("b", Tensor::scalar(7.0));
        let arch = Architecture {
            kind: ModelKind::Student,
            teacher: None,
            student: Some(StudentConfig::default()),
            codebook: None,
        };
        let mut adam = Adam::new(AdamConfig::new(1e-3, 0.97)).unwrap();
        for (_, t) in ps.iter_mut() {
            let n = t.numel();
            t.set_grad(vec![0.5; n]).unwrap();
        }
        adam.step(&mut [&mut ps], 0);
        ModelCheckpoint::new(arch, Stage::Distill, 3, 11, "abc".into(), &[&ps])
            .with_optimizer(&adam)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.encode();
        let back = ModelCheckpoint::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), bytes);
        let adam = back.optimizer().unwrap().unwrap();
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().encode();
        let mut bad = bytes.clone();
        let mid = bad.len() - 40;
        bad[mid] ^= 1;
        let err = ModelCheckpoint::decode(&bad).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
        assert!(ModelCheckpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(ModelCheckpoint::decode(&magic).is_err());
    }

    #[test]
    fn architecture_mismatch_is_refused() {
        let c = sample();
        let other = Architecture {
            kind: ModelKind::Student,
            teacher: None,
            student: Some(StudentConfig {
                widths: [4, 8, 12, 16],
                groups: 4,
            }),
            codebook: None,
        };
        assert!(c.require_architecture(&other).is_err());
        assert!(c
            .require_architecture(&c.header.architecture.clone())
            .is_ok());
    }
}
