//! Binary checkpoints.
//!
//! Little-endian layout: magic `PABM`, format version `u32`, tensor count
//! `u32`, then per tensor its name length `u32`, name bytes, rank `u32`,
//! dims `u32 × rank` and an `f32` payload; finally a `u32`-length-prefixed
//! JSON metadata blob.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::blocks::Params;
use crate::numeric::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PABM";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Encoder and classification head.
    Classifier,
    /// Encoder only, as saved after pretraining.
    Encoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub seed: u64,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Params,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Trailer {
    config: ModelConfig,
    #[serde(flatten)]
    meta: CheckpointMeta,
}

impl Checkpoint {
    /// Parameters the checkpoint must hold for its kind and config.
    pub fn expected_specs(&self) -> Vec<crate::blocks::ParamSpec> {
        match self.meta.kind {
            CheckpointKind::Classifier => self.config.classifier_specs(),
            CheckpointKind::Encoder => self.config.encoder_specs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.params.validate(&self.expected_specs())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, count(self.params.len())?);
        for (name, t) in self.params.iter() {
            put_u32(&mut out, count(name.len())?);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, count(t.rank())?);
            for &d in t.shape() {
                put_u32(&mut out, count(d)?);
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        if let Some((k, v)) = self.meta.metrics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Format(format!("metric {k} is {v}")));
        }
        let trailer = Trailer {
            config: self.config.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&trailer)?;
        put_u32(&mut out, count(json.len())?);
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let n = r.u32()? as usize;
        let mut params = Params::new();
        let mut seen = HashSet::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
            let payload = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("overflow".into()))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            params.insert(name, t);
        }
        let len = r.u32()? as usize;
        let trailer: Trailer = serde_json::from_slice(r.take(len)?)?;
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after metadata".into()));
        }
        Ok(Self {
            config: trailer.config,
            params,
            meta: trailer.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Reads and validates a checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Self::from_bytes(&fs::read(path)?)?;
        ck.validate()?;
        Ok(ck)
    }
}

fn count(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let config = tiny();
        let params = Params::init(&config.classifier_specs(), &mut ChaCha8Rng::seed_from_u64(1));
        Checkpoint {
            config,
            params,
            meta: CheckpointMeta {
                kind: CheckpointKind::Classifier,
                seed: 42,
                epoch: 3,
                metrics: BTreeMap::from([
                    ("val_acc".to_string(), 0.1 + 0.2),
                    ("loss".to_string(), 1.1027154157906283),
                    ("lr".to_string(), 8.588527370402095e-6),
                ]),
                class_names: vec!["a".into(), "b".into(), "c".into()],
            },
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        back.validate().unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.config, ck.config);
        for ((_, a), (_, b)) in back.params.iter().zip(ck.params.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn layout_header() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"PABM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let n = sample().params.len() as u32;
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), n);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(Checkpoint::from_bytes(truncated).is_err());
        bytes[0] = b'X';
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Format(m)) => assert_eq!(m, "bad magic"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validation_catches_missing_tensors() {
        let mut ck = sample();
        ck.params = ck.params.filter_prefix("encoder.");
        assert!(ck.validate().is_err());
        ck.meta.kind = CheckpointKind::Encoder;
        ck.validate().unwrap();
    }
}
