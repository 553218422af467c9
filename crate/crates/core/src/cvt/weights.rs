//! Named-tensor container: an 8-byte little-endian header length, a UTF-8
//! JSON index `{name: {dtype: "F32", shape, offset}}` with byte offsets into
//! the payload, then the raw little-endian payload.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{tensor_specs, CvTConfig, CvtError, TensorKind};
use crate::imaging::write_atomic;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorStore {
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<(), CvtError> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(CvtError::Shape(format!(
                "{name}: {} values for shape {shape:?}",
                data.len()
            )));
        }
        self.tensors.insert(name, Tensor { shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Data of `name`, checked against the expected shape.
    pub fn require(&self, name: &str, shape: &[usize]) -> Result<&[f32], CvtError> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| CvtError::MissingTensors(vec![name.to_string()]))?;
        if t.shape != shape {
            return Err(CvtError::TensorShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape.clone(),
            });
        }
        Ok(&t.data)
    }

    /// Checks that every tensor the config needs is present with the right
    /// shape; all missing names are reported together.
    pub fn check(&self, cfg: &CvTConfig) -> Result<(), CvtError> {
        let specs = tensor_specs(cfg);
        let missing: Vec<String> = specs
            .iter()
            .filter(|s| !self.tensors.contains_key(&s.name))
            .map(|s| s.name.clone())
            .collect();
        if !missing.is_empty() {
            return Err(CvtError::MissingTensors(missing));
        }
        for s in &specs {
            self.require(&s.name, &s.shape)?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut index = BTreeMap::new();
        let mut offset = 0;
        for (name, t) in &self.tensors {
            index.insert(
                name.clone(),
                IndexEntry {
                    dtype: "F32".into(),
                    shape: t.shape.clone(),
                    offset,
                },
            );
            offset += 4 * t.data.len();
        }
        let header = serde_json::to_vec(&index).expect("serializable index");
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CvtError> {
        let fmt = |m: String| CvtError::Format(m);
        if bytes.len() < 8 {
            return Err(fmt("file shorter than the header length field".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let hlen = usize::try_from(hlen).map_err(|_| fmt("header length overflows".into()))?;
        if hlen > bytes.len() - 8 {
            return Err(fmt(format!("header length {hlen} exceeds file size")));
        }
        let index: BTreeMap<String, IndexEntry> = serde_json::from_slice(&bytes[8..8 + hlen])
            .map_err(|e| fmt(format!("bad index: {e}")))?;
        let payload = &bytes[8 + hlen..];

        let mut ranges = Vec::with_capacity(index.len());
        for (name, e) in &index {
            if e.dtype != "F32" {
                return Err(fmt(format!("{name}: unsupported dtype {}", e.dtype)));
            }
            let numel = e.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let end = numel
                .and_then(|n| n.checked_mul(4))
                .and_then(|b| e.offset.checked_add(b))
                .ok_or_else(|| fmt(format!("{name}: size overflows")))?;
            ranges.push((e.offset, end, name));
        }
        ranges.sort();
        for w in ranges.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(fmt(format!("tensors {} and {} overlap", w[0].2, w[1].2)));
            }
        }
        let used: usize = ranges.iter().map(|(a, b, _)| b - a).sum();
        if let Some((_, end, name)) = ranges.iter().find(|(_, end, _)| *end > payload.len()) {
            return Err(fmt(format!(
                "payload truncated: {name} ends at {end}, payload is {} bytes",
                payload.len()
            )));
        }
        if used != payload.len() {
            return Err(fmt(format!(
                "payload holds {} bytes, index accounts for {used}",
                payload.len()
            )));
        }

        let mut store = TensorStore::new();
        for (name, e) in index {
            let n: usize = e.shape.iter().product();
            let data = payload[e.offset..e.offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.tensors.insert(
                name,
                Tensor {
                    shape: e.shape,
                    data,
                },
            );
        }
        Ok(store)
    }
}

pub fn save_weights(store: &TensorStore, path: impl AsRef<Path>) -> Result<(), CvtError> {
    write_atomic(path.as_ref(), &store.encode())?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<TensorStore, CvtError> {
    TensorStore::decode(&std::fs::read(path)?)
}

/// Seeded random weights for every tensor of `cfg`: normal(0, 0.02) for
/// convolutions, linears, biases and the cls token; unit scale and zero
/// shift for normalization layers; BN running mean 0 and variance 1.
pub fn random_weights(cfg: &CvTConfig, seed: u64) -> TensorStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 0.02).expect("valid std");
    let mut store = TensorStore::new();
    for s in tensor_specs(cfg) {
        let n = s.numel();
        let is_norm = s.name.contains("norm") || s.name.contains(".bn.");
        let data = if s.kind == TensorKind::Buffer {
            let fill = if s.name.ends_with("running_var") {
                1.0
            } else {
                0.0
            };
            vec![fill; n]
        } else if is_norm {
            vec![
                if s.name.ends_with(".weight") {
                    1.0
                } else {
                    0.0
                };
                n
            ]
        } else {
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        store
            .insert(s.name, s.shape, data)
            .expect("spec-sized tensor");
    }
    store
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorStore {
        let mut s = TensorStore::new();
        s.insert("b", vec![2, 3], (0..6).map(|v| v as f32 * 0.5).collect())
            .unwrap();
        s.insert("a", vec![4], vec![1.0, -2.0, f32::MIN_POSITIVE, 3.5])
            .unwrap();
        s.insert("empty", vec![0, 7], vec![]).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let bytes = s.encode();
        let back = TensorStore::decode(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.encode(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        save_weights(&s, &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
        assert_eq!(load_weights(&p).unwrap(), s);
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().encode();
        assert!(matches!(
            TensorStore::decode(&bytes[..bytes.len() - 1]),
            Err(CvtError::Format(_))
        ));
        assert!(TensorStore::decode(&bytes[..5]).is_err());
    }

    fn with_index(index: &str, payload: usize) -> Vec<u8> {
        let mut out = (index.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(index.as_bytes());
        out.extend(std::iter::repeat_n(0u8, payload));
        out
    }

    #[test]
    fn overlapping_offsets_are_rejected() {
        let idx = r#"{"a":{"dtype":"F32","shape":[2],"offset":0},"b":{"dtype":"F32","shape":[2],"offset":4}}"#;
        let err = TensorStore::decode(&with_index(idx, 16)).unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
        let ok = r#"{"a":{"dtype":"F32","shape":[2],"offset":0},"b":{"dtype":"F32","shape":[2],"offset":8}}"#;
        assert!(TensorStore::decode(&with_index(ok, 16)).is_ok());
        let f16 = r#"{"a":{"dtype":"F16","shape":[2],"offset":0}}"#;
        assert!(TensorStore::decode(&with_index(f16, 4)).is_err());
    }

    #[test]
    fn random_weights_cover_the_config() {
        let cfg = CvTConfig::original13();
        let w = random_weights(&cfg, 1);
        w.check(&cfg).unwrap();
        assert_eq!(
            w.get("stage0.blocks.0.attn.conv_proj_k.bn.running_var")
                .unwrap()
                .data[0],
            1.0
        );
        assert_eq!(w.get("norm.weight").unwrap().data[0], 1.0);
        let mut partial = w.clone();
        partial.tensors.remove("head.bias");
        partial.tensors.remove("stage2.cls_token");
        match partial.check(&cfg) {
            Err(CvtError::MissingTensors(names)) => {
                assert_eq!(
                    names,
                    vec!["stage2.cls_token".to_string(), "head.bias".to_string()]
                )
            }
            other => panic!("{other:?}"),
        }
    }
}
