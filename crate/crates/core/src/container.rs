//! Tensor container file format.
//!
//! Layout: 8-byte magic `TDPE0001`, a little-endian u32 header length, a UTF-8
//! JSON header listing name/shape/dtype per tensor (plus an optional `meta`
//! value), then the raw little-endian payloads in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TDPE0001";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    meta: serde_json::Value,
    tensors: Vec<EntryDesc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryDesc {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Clone)]
pub enum Payload {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl Payload {
    fn dtype(&self) -> &'static str {
        match self {
            Payload::F32(_) => "f32",
            Payload::F64(_) => "f64",
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            Payload::F32(t) => t.shape(),
            Payload::F64(t) => t.shape(),
        }
    }
}

/// In-memory view of a container file.
#[derive(Debug, Default)]
pub struct Container {
    pub meta: serde_json::Value,
    entries: Vec<(String, Payload)>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container { meta, entries: Vec::new() }
    }

    pub fn push_f32(&mut self, name: &str, t: &Tensor<f32>) {
        self.entries.push((name.to_string(), Payload::F32(t.clone())));
    }

    pub fn push_f64(&mut self, name: &str, t: &Tensor<f64>) {
        self.entries.push((name.to_string(), Payload::F64(t.clone())));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get_f32(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.entries.iter().find(|(n, _)| n == name) {
            Some((_, Payload::F32(t))) => Ok(t),
            Some((_, Payload::F64(_))) => {
                Err(Error::Container(format!("tensor {name:?} has dtype f64, expected f32")))
            }
            None => Err(Error::Container(format!("missing tensor {name:?}"))),
        }
    }

    pub fn get_f64(&self, name: &str) -> Result<&Tensor<f64>> {
        match self.entries.iter().find(|(n, _)| n == name) {
            Some((_, Payload::F64(t))) => Ok(t),
            Some((_, Payload::F32(_))) => {
                Err(Error::Container(format!("tensor {name:?} has dtype f32, expected f64")))
            }
            None => Err(Error::Container(format!("missing tensor {name:?}"))),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .entries
                .iter()
                .map(|(n, p)| EntryDesc {
                    name: n.clone(),
                    shape: p.shape().to_vec(),
                    dtype: p.dtype().to_string(),
                })
                .collect(),
        };
        let hjson = serde_json::to_vec(&header).map_err(|e| Error::Container(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(hjson.len() as u32).to_le_bytes())?;
        w.write_all(&hjson)?;
        for (_, p) in &self.entries {
            match p {
                Payload::F32(t) => {
                    for v in t.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Payload::F64(t) => {
                    for v in t.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Container(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(MAGIC)
            )));
        }
        let mut len4 = [0u8; 4];
        r.read_exact(&mut len4)?;
        let hlen = u32::from_le_bytes(len4) as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)?;
        let header: Header =
            serde_json::from_slice(&hbuf).map_err(|e| Error::Container(format!("header: {e}")))?;
        let mut entries = Vec::with_capacity(header.tensors.len());
        for desc in header.tensors {
            let numel: usize = desc.shape.iter().product();
            let payload = match desc.dtype.as_str() {
                "f32" => {
                    let mut buf = vec![0u8; numel * 4];
                    r.read_exact(&mut buf)?;
                    let data: Vec<f32> = buf
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    Payload::F32(Tensor::from_vec(&desc.shape, data).map_err(|e| {
                        Error::Container(format!("tensor {:?}: {e}", desc.name))
                    })?)
                }
                "f64" => {
                    let mut buf = vec![0u8; numel * 8];
                    r.read_exact(&mut buf)?;
                    let data: Vec<f64> = buf
                        .chunks_exact(8)
                        .map(|c| {
                            f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                        })
                        .collect();
                    Payload::F64(Tensor::from_vec(&desc.shape, data).map_err(|e| {
                        Error::Container(format!("tensor {:?}: {e}", desc.name))
                    })?)
                }
                other => {
                    return Err(Error::Container(format!(
                        "tensor {:?}: unknown dtype {other:?}",
                        desc.name
                    )))
                }
            };
            entries.push((desc.name, payload));
        }
        Ok(Container { meta: header.meta, entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_mixed_dtypes() {
        let mut c = Container::new(serde_json::json!({"kind": "test", "n": 3}));
        let t32 = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.5);
        let t64 = Tensor::<f64>::from_fn(&[4], |i| (i as f64).sin());
        c.push_f32("weights", &t32);
        c.push_f64("oracle", &t64);

        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);

        let back = Container::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.meta["kind"], "test");
        assert_eq!(back.get_f32("weights").unwrap().data(), t32.data());
        assert_eq!(back.get_f64("oracle").unwrap().data(), t64.data());
        assert!(back.get_f32("oracle").is_err());
        assert!(back.get_f32("nope").is_err());
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOTMAGIC\0\0\0\0".to_vec();
        assert!(Container::read_from(&mut buf.as_slice()).is_err());
    }
}
