//! Tensor checkpoint format.
//!
//! Layout: the 8-byte magic `CSKT0001`, a little-endian `u64` header
//! length, a JSON header listing tensor names, shapes, and byte offsets
//! into the data section, then the raw tensor data as little-endian
//! `f64`. Tensors are stored sorted by name and the header is compact
//! JSON, so identical contents serialize to identical bytes.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CSKT0001";

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<HeaderEntry>,
}

/// An in-memory named-tensor collection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.insert(name.to_string(), (shape, data));
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.entries
            .get(name)
            .map(|(s, d)| (s.as_slice(), d.as_slice()))
    }

    /// Tensor lookup that errors with the missing name.
    pub fn require(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::with_capacity(self.entries.len());
        let mut offset = 0u64;
        for (name, (shape, data)) in &self.entries {
            tensors.push(HeaderEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
                len: data.len() as u64,
            });
            offset += (data.len() * 8) as u64;
        }
        let header = serde_json::to_vec(&Header { tensors }).expect("header serializes");

        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, (_, data)) in &self.entries {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let mut magic = [0u8; 8];
        cursor
            .read_exact(&mut magic)
            .map_err(|_| Error::Format("checkpoint shorter than magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {:?}",
                String::from_utf8_lossy(&magic)
            )));
        }
        let mut len_bytes = [0u8; 8];
        cursor
            .read_exact(&mut len_bytes)
            .map_err(|_| Error::Format("checkpoint truncated before header length".into()))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        if cursor.len() < header_len {
            return Err(Error::Format("checkpoint truncated inside header".into()));
        }
        let header: Header = serde_json::from_slice(&cursor[..header_len])
            .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
        let data = &cursor[header_len..];

        let mut entries = BTreeMap::new();
        for entry in header.tensors {
            let start = entry.offset as usize;
            let nbytes = entry.len as usize * 8;
            if start + nbytes > data.len() {
                return Err(Error::Format(format!(
                    "tensor {:?} extends past the data section",
                    entry.name
                )));
            }
            if entry.shape.iter().product::<usize>() != entry.len as usize {
                return Err(Error::Format(format!(
                    "tensor {:?} shape does not match element count",
                    entry.name
                )));
            }
            let values = data[start..start + nbytes]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.insert(entry.name, (entry.shape, values));
        }
        Ok(Self { entries })
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    #[test]
    fn round_trip_preserves_tensors() {
        let mut ckpt = Checkpoint::new();
        let rng = CounterRng::new(1);
        ckpt.insert("b.weight", vec![2, 3], rng.derive(0).normal_vec(6));
        ckpt.insert("a.bias", vec![4], rng.derive(1).normal_vec(4));
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(ckpt, back);
    }

    #[test]
    fn serialization_is_insertion_order_independent() {
        let rng = CounterRng::new(2);
        let (w, b) = (rng.derive(0).normal_vec(6), rng.derive(1).normal_vec(4));
        let mut one = Checkpoint::new();
        one.insert("w", vec![2, 3], w.clone());
        one.insert("b", vec![4], b.clone());
        let mut two = Checkpoint::new();
        two.insert("b", vec![4], b);
        two.insert("w", vec![2, 3], w);
        assert_eq!(one.to_bytes(), two.to_bytes());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        assert!(Checkpoint::from_bytes(b"short").is_err());
        assert!(Checkpoint::from_bytes(b"WRONGMAG\0\0\0\0\0\0\0\0").is_err());
        let ckpt = {
            let mut c = Checkpoint::new();
            c.insert("t", vec![2], vec![1.0, 2.0]);
            c
        };
        let mut bytes = ckpt.to_bytes();
        bytes.truncate(bytes.len() - 4);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cskt");
        let mut ckpt = Checkpoint::new();
        ckpt.insert("x", vec![1], vec![42.0]);
        ckpt.write_to(&path).unwrap();
        let back = Checkpoint::read_from(&path).unwrap();
        assert_eq!(ckpt, back);
    }
}
