//! `MPGCKPT1` checkpoints: a JSON manifest followed by named `f32` tensors.
//!
//! Layout (little-endian): magic, `u32` manifest length, manifest bytes,
//! `u32` tensor count, then per tensor `u32` name length, name, `u32` rank,
//! `u32` dims, `f32` data.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::NetConfig;
use crate::nn::{Param, Visitor};

pub const MAGIC: &[u8; 8] = b"MPGCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub net: NetConfig,
    /// Training cycles completed.
    pub step: u64,
    pub seed: u64,
    /// Free-form run state (e.g. joint iteration, training mode).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<NamedTensor>,
}

/// Visitor that copies every parameter value and buffer out.
#[derive(Default)]
pub struct Collector {
    pub tensors: Vec<NamedTensor>,
}

impl Visitor for Collector {
    fn param(&mut self, name: &str, p: &mut Param) {
        self.tensors.push(NamedTensor { name: name.to_owned(), shape: p.shape.clone(), data: p.value.clone() });
    }

    fn buffer(&mut self, name: &str, shape: &[usize], data: &mut Vec<f32>) {
        self.tensors.push(NamedTensor { name: name.to_owned(), shape: shape.to_vec(), data: data.clone() });
    }
}

/// Visitor that restores values by name. Missing names and size mismatches
/// are recorded and reported by [`Restorer::finish`].
pub struct Restorer<'a> {
    by_name: HashMap<&'a str, &'a NamedTensor>,
    errors: Vec<String>,
}

impl<'a> Restorer<'a> {
    pub fn new(ckpt: &'a Checkpoint) -> Self {
        Self { by_name: ckpt.tensors.iter().map(|t| (t.name.as_str(), t)).collect(), errors: Vec::new() }
    }

    pub fn finish(self) -> Result<()> {
        if self.errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Malformed(format!("checkpoint does not match model: {}", self.errors.join("; "))))
        }
    }
}

impl Visitor for Restorer<'_> {
    fn param(&mut self, name: &str, p: &mut Param) {
        match self.by_name.get(name) {
            Some(t) if t.data.len() == p.value.len() => p.value.copy_from_slice(&t.data),
            Some(t) => self.errors.push(format!("{name}: {} values, expected {}", t.data.len(), p.value.len())),
            None => self.errors.push(format!("{name}: missing")),
        }
    }

    fn buffer(&mut self, name: &str, _: &[usize], data: &mut Vec<f32>) {
        match self.by_name.get(name) {
            // Empty buffers are lazily allocated state; take whatever was saved.
            Some(t) if data.is_empty() || t.data.len() == data.len() => {
                data.clear();
                data.extend_from_slice(&t.data);
            }
            Some(t) => self.errors.push(format!("{name}: {} values, expected {}", t.data.len(), data.len())),
            None => self.errors.push(format!("{name}: missing")),
        }
    }
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Malformed("checkpoint is truncated".into())
    } else {
        Error::Io(e)
    }
}

const MAX_NAME: usize = 4096;

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        let manifest = serde_json::to_vec(&self.manifest)?;
        write_u32(&mut w, manifest.len())?;
        w.write_all(&manifest)?;
        write_u32(&mut w, self.tensors.len())?;
        for t in &self.tensors {
            write_u32(&mut w, t.name.len())?;
            w.write_all(t.name.as_bytes())?;
            write_u32(&mut w, t.shape.len())?;
            for &d in &t.shape {
                write_u32(&mut w, d)?;
            }
            let mut buf = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Malformed("not a checkpoint (bad magic)".into()));
        }
        let len = read_u32(&mut r)?;
        let mut manifest = Vec::new();
        (&mut r).take(len as u64).read_to_end(&mut manifest)?;
        if manifest.len() != len {
            return Err(Error::Malformed("checkpoint is truncated".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&manifest)
            .map_err(|e| Error::Malformed(format!("checkpoint manifest: {e}")))?;
        let count = read_u32(&mut r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)?;
            if name_len > MAX_NAME {
                return Err(Error::Malformed(format!("tensor name of {name_len} bytes")));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name).map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)?;
            if rank > 8 {
                return Err(Error::Malformed(format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.filter(|&n| n <= 1 << 30).ok_or_else(|| Error::Malformed(format!("tensor {name} is too large")))?;
            let mut bytes = Vec::new();
            (&mut r).take(numel as u64 * 4).read_to_end(&mut bytes)?;
            if bytes.len() != numel * 4 {
                return Err(Error::Malformed("checkpoint is truncated".into()));
            }
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Malformed("trailing bytes after checkpoint".into()));
        }
        Ok(Self { manifest, tensors })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("mpg.tmp");
        self.write_to(BufWriter::new(fs::File::create(&tmp)?))?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(fs::File::open(path)?))
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}
