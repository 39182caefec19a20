//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DAPACKPT" | u32 version | u32 section count
//! per section: u8 kind | u32 name length | name | u64 payload length | payload | u32 crc32
//! ```
//!
//! Section 0 is the JSON header (kind 0). Every tensor in the header is
//! replaced by `{"shape": [...], "section": i}` and its values stored in
//! section `i` (kind 1) as raw `f64`s. The checksum covers kind, name and
//! payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::nn::AdamState;
use crate::pose_prior::PriorParams;
use crate::regressor::RegressorParams;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DAPACKPT";
const KIND_JSON: u8 = 0;
const KIND_F64: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated in {0}")]
    Truncated(String),
    #[error("checksum mismatch in section {0:?}")]
    Checksum(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Prior,
    Regressor,
}

/// Keyed RNG streams make `(seed, step)` the complete generator state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: CheckpointKind,
    pub tree_fingerprint: String,
    pub step: usize,
    pub rng: RngState,
    pub config: Value,
    /// Identifies the prior a regressor was adapted with.
    pub prior_ref: Option<String>,
    pub regressor: Option<RegressorParams>,
    pub prior: Option<PriorParams>,
    pub optimizer: Option<AdamState>,
}

fn is_tensor(m: &Map<String, Value>) -> bool {
    m.len() == 2 && m.get("shape").is_some_and(Value::is_array) && m.get("data").is_some_and(Value::is_array)
}

fn extract(v: &mut Value, out: &mut Vec<Vec<f64>>) -> Result<(), CheckpointError> {
    match v {
        Value::Object(m) if is_tensor(m) => {
            let data = m.remove("data").unwrap();
            let vals = data
                .as_array()
                .unwrap()
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| CheckpointError::Malformed("non-finite tensor value".into())))
                .collect::<Result<Vec<_>, _>>()?;
            m.insert("section".into(), Value::from(out.len() + 1));
            out.push(vals);
        }
        Value::Object(m) => {
            for x in m.values_mut() {
                extract(x, out)?;
            }
        }
        Value::Array(a) => {
            for x in a {
                extract(x, out)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn restore(v: &mut Value, sections: &mut [Option<Vec<f64>>]) -> Result<(), CheckpointError> {
    match v {
        Value::Object(m) if m.len() == 2 && m.contains_key("shape") && m.contains_key("section") => {
            let idx = m["section"]
                .as_u64()
                .ok_or_else(|| CheckpointError::Malformed("bad section index".into()))? as usize;
            let data = sections
                .get_mut(idx)
                .and_then(Option::take)
                .ok_or_else(|| CheckpointError::Malformed(format!("missing or reused section {idx}")))?;
            m.remove("section");
            m.insert("data".into(), Value::from(data));
        }
        Value::Object(m) => {
            for x in m.values_mut() {
                restore(x, sections)?;
            }
        }
        Value::Array(a) => {
            for x in a {
                restore(x, sections)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn push_section(buf: &mut Vec<u8>, kind: u8, name: &str, payload: &[u8]) {
    let mut h = crc32fast::Hasher::new();
    h.update(&[kind]);
    h.update(name.as_bytes());
    h.update(payload);
    buf.push(kind);
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    buf.extend_from_slice(payload);
    buf.extend_from_slice(&h.finalize().to_le_bytes());
}

impl Checkpoint {
    /// Wraps a trained prior.
    pub fn for_prior(prior: PriorParams, tree_fingerprint: String, seed: u64, steps: usize, config: Value) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            kind: CheckpointKind::Prior,
            tree_fingerprint,
            step: steps,
            rng: RngState { seed, step: steps },
            config,
            prior_ref: None,
            regressor: None,
            prior: Some(prior),
            optimizer: None,
        }
    }

    pub fn into_prior(self) -> Result<PriorParams, CheckpointError> {
        match (self.kind, self.prior) {
            (CheckpointKind::Prior, Some(p)) => Ok(p),
            _ => Err(CheckpointError::Malformed("not a prior checkpoint".into())),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut header = serde_json::to_value(self).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let mut arrays = Vec::new();
        extract(&mut header, &mut arrays)?;
        let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&((arrays.len() + 1) as u32).to_le_bytes());
        push_section(&mut buf, KIND_JSON, "header", &json);
        for (i, a) in arrays.iter().enumerate() {
            let payload: Vec<u8> = a.iter().flat_map(|v| v.to_le_bytes()).collect();
            push_section(&mut buf, KIND_F64, &format!("t{}", i + 1), &payload);
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let count = r.u32("section count")? as usize;
        if count == 0 {
            return Err(CheckpointError::Malformed("no header section".into()));
        }
        let mut header: Option<Value> = None;
        let mut sections: Vec<Option<Vec<f64>>> = vec![None];
        for i in 0..count {
            let label = format!("section {i}");
            let kind = r.take(1, &label)?[0];
            let name_len = r.u32(&label)? as usize;
            let name = String::from_utf8(r.take(name_len, &label)?.to_vec())
                .map_err(|_| CheckpointError::Malformed(format!("{label}: name is not UTF-8")))?;
            let len = r.u64(&name)?;
            let len = usize::try_from(len).map_err(|_| CheckpointError::Truncated(name.clone()))?;
            let payload = r.take(len, &name)?;
            let crc = r.u32(&name)?;
            let mut h = crc32fast::Hasher::new();
            h.update(&[kind]);
            h.update(name.as_bytes());
            h.update(payload);
            if h.finalize() != crc {
                return Err(CheckpointError::Checksum(name));
            }
            match (i, kind) {
                (0, KIND_JSON) => {
                    header = Some(
                        serde_json::from_slice(payload)
                            .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?,
                    )
                }
                (0, _) => return Err(CheckpointError::Malformed("first section must be the header".into())),
                (_, KIND_F64) if len % 8 == 0 => sections.push(Some(
                    payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )),
                _ => return Err(CheckpointError::Malformed(format!("{name}: unexpected section kind {kind}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed("trailing bytes after last section".into()));
        }
        let mut header = header.unwrap();
        restore(&mut header, &mut sections)?;
        if sections.iter().any(Option::is_some) {
            return Err(CheckpointError::Malformed("unreferenced tensor section".into()));
        }
        serde_json::from_value(header).map_err(|e| CheckpointError::Malformed(format!("header: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Short content hash of the serialized checkpoint.
    pub fn fingerprint(&self) -> Result<String, CheckpointError> {
        Ok(format!("{:08x}", crc32fast::hash(&self.to_bytes()?)))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated(what.to_string())),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::KinematicTree;
    use crate::pose_prior::PriorConfig;
    use crate::regressor::{param_dim, RegressorConfig};
    use crate::rng;

    fn sample() -> Checkpoint {
        let tree = KinematicTree::default_17();
        let cfg = RegressorConfig {
            hidden: vec![8],
            ..RegressorConfig::default()
        };
        let mean: Vec<f64> = (0..param_dim(17)).map(|i| (i as f64 * 0.37).sin() / 3.0).collect();
        let reg = RegressorParams::init(&cfg, &tree, mean, &mut rng::stream(1, 0)).unwrap();
        let mut adam = AdamState::new(reg.tensors(), 3e-4);
        adam.step = 17;
        adam.m[0].data_mut()[3] = 1.0 / 3.0;
        let prior = PriorParams::init(
            &PriorConfig {
                hidden: vec![4],
                ..PriorConfig::default()
            },
            48,
            &mut rng::stream(2, 0),
        );
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: CheckpointKind::Regressor,
            tree_fingerprint: tree.fingerprint(),
            step: 17,
            rng: RngState { seed: 4, step: 17 },
            config: serde_json::json!({"lr": 0.0003, "mode": "dapa"}),
            prior_ref: Some("prior.ckpt:deadbeef".into()),
            regressor: Some(reg),
            prior: Some(prior),
            optimizer: Some(adam),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        let c = sample();
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [3, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, CheckpointError::Truncated(_) | CheckpointError::BadMagic), "{cut}: {err}");
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 100] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Checksum(_))));
    }

    #[test]
    fn version_is_checked() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 99;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Version { found: 99, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn prior_checkpoint_round_trip() {
        let prior = sample().prior.unwrap();
        let c = Checkpoint::for_prior(prior.clone(), "abc".into(), 3, 10, serde_json::json!({}));
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.into_prior().unwrap(), prior);
        assert!(sample().into_prior().is_err());
    }
}
