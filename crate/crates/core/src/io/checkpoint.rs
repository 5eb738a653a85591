//! Named-tensor checkpoints.
//!
//! Layout (little-endian): `"T2VL"`, version `u32`, entry count `u32`, then
//! per entry: name length `u32`, UTF-8 name, dtype `u8` (0 = f32, 1 = f64),
//! ndim `u8`, one `u32` per dim, raw payload.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"T2VL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn as_f32(&self) -> Result<&Tensor<f32>> {
        match self {
            AnyTensor::F32(t) => Ok(t),
            AnyTensor::F64(_) => Err(Error::Format("expected an f32 tensor, found f64".into())),
        }
    }
}

pub type Entries = Vec<(String, AnyTensor)>;

pub fn write_checkpoint<W: Write>(mut w: W, entries: &[(String, AnyTensor)]) -> Result<()> {
    let mut seen = HashSet::new();
    for (name, _) in entries {
        if !seen.insert(name.as_str()) {
            return Err(Error::Contract(format!("duplicate checkpoint entry {name:?}")));
        }
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = t.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::Contract(format!("{name}: rank {} too large", shape.len())));
        }
        w.write_all(&[t.dtype().code(), shape.len() as u8])?;
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::Contract(format!("{name}: dim {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        match t {
            AnyTensor::F32(t) => {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            AnyTensor::F64(t) => {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Corrupt {
                offset: self.bytes.len() as u64,
                msg: format!("file ends inside {what} starting at byte {}", self.pos),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Parses a whole checkpoint; nothing is returned unless every entry is valid.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Entries> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    c.pos = 4;
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let count = c.u32("entry count")?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let start = c.pos as u64;
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Corrupt {
                offset: start,
                msg: "entry name is not UTF-8".into(),
            })?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate entry {name:?}")));
        }
        let dtype = c.u8("dtype")?;
        let ndim = c.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32("dims")? as usize);
        }
        if shape.contains(&0) {
            return Err(Error::Corrupt {
                offset: start,
                msg: format!("{name:?} has a zero dimension"),
            });
        }
        let n: usize = shape.iter().product();
        let t = match dtype {
            0 => {
                let raw = c.take(n * 4, &name)?;
                let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4"))).collect();
                AnyTensor::F32(Tensor::new(shape, data)?)
            }
            1 => {
                let raw = c.take(n * 8, &name)?;
                let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8"))).collect();
                AnyTensor::F64(Tensor::new(shape, data)?)
            }
            d => {
                return Err(Error::Corrupt {
                    offset: c.pos as u64 - 2 - ndim as u64 * 4,
                    msg: format!("unknown dtype code {d} in {name:?}"),
                })
            }
        };
        out.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(Error::Corrupt {
            offset: c.pos as u64,
            msg: format!("{} trailing bytes", bytes.len() - c.pos),
        });
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, entries: &[(String, AnyTensor)]) -> Result<()> {
    let f = File::create(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    write_checkpoint(BufWriter::new(f), entries)
}

pub fn load_checkpoint(path: &Path) -> Result<Entries> {
    let f = File::open(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    read_checkpoint(BufReader::new(f))
}

/// Entries for every parameter of `m`, each name prefixed with `prefix.`.
pub fn module_entries(prefix: &str, m: &dyn Module<f32>) -> Entries {
    m.params()
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), AnyTensor::F32(t.clone())))
        .collect()
}

/// Copies `prefix.*` entries into `m`. Every parameter must be present with
/// a matching shape; gradient flags are left as they were.
pub fn load_module(prefix: &str, m: &mut dyn Module<f32>, entries: &[(String, AnyTensor)]) -> Result<()> {
    for (name, p) in m.params_mut() {
        let key = format!("{prefix}.{name}");
        let t = entries
            .iter()
            .find(|(n, _)| *n == key)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))?
            .1
            .as_f32()?;
        if t.shape() != p.shape() {
            return Err(Error::Format(format!("{key}: shape {:?}, model expects {:?}", t.shape(), p.shape())));
        }
        p.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

/// Looks up one entry by name.
pub fn entry<'a>(entries: &'a [(String, AnyTensor)], name: &str) -> Result<&'a AnyTensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))
}
