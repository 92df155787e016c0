//! ARTC checkpoint container.
//!
//! ```text
//! "ARTC"  u32 version = 1  u32 manifest_len  manifest (UTF-8, manifest_len bytes)  payload
//! ```
//!
//! The manifest is newline-separated records:
//!
//! ```text
//! meta <key> <value...>
//! tensor <name> f32 <d0>x<d1>x...      ("-" for a zero-dimensional tensor)
//! ```
//!
//! The payload is every tensor's values as little-endian f32, in manifest
//! order. Keys and names contain no whitespace; meta values no newlines.

use std::io::{Read, Write};

use super::{NnError, Tensor};

pub const MAGIC: &[u8; 4] = b"ARTC";
pub const VERSION: u32 = 1;
const MAX_MANIFEST: u32 = 1 << 24;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn corrupt(msg: impl Into<String>) -> NnError {
    NnError::CorruptCheckpoint(msg.into())
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string().replace(['\n', '\r'], " ");
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Removes and returns the named tensor, checking its shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor, NnError> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        let t = self.tensors.remove(pos).1;
        if t.shape() != shape {
            return Err(corrupt(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn write(&self, w: &mut impl Write) -> std::io::Result<()> {
        let mut manifest = String::new();
        for (k, v) in &self.meta {
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, t) in &self.tensors {
            let shape = if t.shape().is_empty() {
                "-".to_string()
            } else {
                t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            };
            manifest.push_str(&format!("tensor {name} f32 {shape}\n"));
        }
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(manifest.len() as u32).to_le_bytes())?;
        w.write_all(manifest.as_bytes())?;
        for (_, t) in &self.tensors {
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read(r: &mut impl Read) -> Result<Self, NnError> {
        let eof = |e: std::io::Error| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                corrupt("truncated")
            } else {
                NnError::Io(e)
            }
        };
        let mut head = [0u8; 12];
        r.read_exact(&mut head).map_err(eof)?;
        if &head[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(head[8..12].try_into().unwrap());
        if len > MAX_MANIFEST {
            return Err(corrupt("manifest too large"));
        }
        let mut manifest = vec![0u8; len as usize];
        r.read_exact(&mut manifest).map_err(eof)?;
        let manifest = String::from_utf8(manifest).map_err(|_| corrupt("manifest is not UTF-8"))?;
        let mut ck = Checkpoint::default();
        let mut shapes = Vec::new();
        for line in manifest.lines().filter(|l| !l.is_empty()) {
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("meta"), Some(k), v) => ck.meta.push((k.to_string(), v.unwrap_or("").to_string())),
                (Some("tensor"), Some(name), Some(rest)) => {
                    let (dtype, dims) = rest.split_once(' ').ok_or_else(|| corrupt(format!("bad record: {line}")))?;
                    if dtype != "f32" {
                        return Err(corrupt(format!("unsupported dtype {dtype}")));
                    }
                    let shape: Vec<usize> = if dims == "-" {
                        vec![]
                    } else {
                        dims.split('x')
                            .map(|d| d.parse().ok().filter(|&d: &usize| d > 0))
                            .collect::<Option<_>>()
                            .ok_or_else(|| corrupt(format!("bad shape {dims}")))?
                    };
                    if shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).is_none_or(|n| n > 1 << 30) {
                        return Err(corrupt(format!("implausible shape {dims}")));
                    }
                    shapes.push((name.to_string(), shape));
                }
                _ => return Err(corrupt(format!("bad record: {line}"))),
            }
        }
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes).map_err(eof)?;
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = if shape.is_empty() {
                Tensor::scalar(data[0])
            } else {
                Tensor::new(shape, data)?
            };
            ck.tensors.push((name, t));
        }
        Ok(ck)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = bytes;
        Self::read(&mut r)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), NnError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, NnError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
