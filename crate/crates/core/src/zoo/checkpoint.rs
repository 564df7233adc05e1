//! The container format.
//!
//! ```text
//! "AMLG"                      magic
//! u32                         version (1)
//! u32 + bytes                 header: UTF-8 `key=value` lines, sorted by key
//! u32                         tensor count
//!   u32 + bytes               name (UTF-8)
//!   u8                        dtype: 1 = f64, 2 = u64
//!   u32, u64 * rank           shape
//!   8 * numel bytes           payload
//! u64                         FNV-1a 64 of every preceding byte
//! ```
//!
//! All integers and floats are little-endian. Nothing time- or
//! host-dependent is written, so saving the same object twice yields the
//! same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AMLG";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 1;
const DTYPE_U64: u8 = 2;

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64(Tensor),
    U64 { shape: Vec<usize>, data: Vec<u64> },
}

impl Payload {
    pub fn shape(&self) -> &[usize] {
        match self {
            Payload::F64(t) => t.shape(),
            Payload::U64 { shape, .. } => shape,
        }
    }
}

/// A decoded container: a flat header plus named tensors in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<(String, Payload)>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        let mut c = Self::default();
        c.set("kind", kind);
        c
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.header.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("header has no {key:?} entry")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        let found = self.get("kind")?;
        if found != kind {
            return Err(Error::Format(format!("expected a {kind} checkpoint, found {found}")));
        }
        Ok(())
    }

    pub fn push_f64(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push((name.into(), Payload::F64(t.clone())));
    }

    pub fn push_u64(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<u64>) {
        self.tensors.push((
            name.into(),
            Payload::U64 {
                shape: shape.to_vec(),
                data,
            },
        ));
    }

    pub fn tensor(&self, name: &str) -> Result<&Payload> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn f64(&self, name: &str) -> Result<&Tensor> {
        match self.tensor(name)? {
            Payload::F64(t) => Ok(t),
            Payload::U64 { .. } => Err(Error::Format(format!("tensor {name:?} is not f64"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<&[u64]> {
        match self.tensor(name)? {
            Payload::U64 { data, .. } => Ok(data),
            Payload::F64(_) => Err(Error::Format(format!("tensor {name:?} is not u64"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut header = String::new();
        for (k, v) in &self.header {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("header entry {k:?}={v:?} cannot be encoded")));
            }
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        }
        put_bytes(&mut out, header.as_bytes())?;
        put_u32(&mut out, self.tensors.len())?;
        for (name, payload) in &self.tensors {
            put_bytes(&mut out, name.as_bytes())?;
            let shape = payload.shape();
            out.push(match payload {
                Payload::F64(_) => DTYPE_F64,
                Payload::U64 { .. } => DTYPE_U64,
            });
            put_u32(&mut out, shape.len())?;
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match payload {
                Payload::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Payload::U64 { shape, data } => {
                    if shape.iter().product::<usize>() != data.len() {
                        return Err(Error::Shape(format!("u64 tensor {name:?}: shape {shape:?} vs {} values", data.len())));
                    }
                    data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not an AMLG container (bad magic)".into()));
        }
        if bytes.len() < 4 + 4 + 8 {
            return Err(Error::Corruption(format!("container truncated to {} bytes", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let actual = fnv1a64(body);
        if stored != actual {
            return Err(Error::Corruption(format!(
                "stored {stored:016x}, computed {actual:016x}"
            )));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version > VERSION {
            return Err(Error::Version(version));
        }
        if version == 0 {
            return Err(Error::Format("version 0 is not a valid container version".into()));
        }
        let header_text = std::str::from_utf8(r.bytes()?).map_err(|e| Error::Format(format!("header: {e}")))?;
        let mut header = BTreeMap::new();
        for line in header_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("header line {line:?} has no '='")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = std::str::from_utf8(r.bytes()?)
                .map_err(|e| Error::Format(format!("tensor name: {e}")))?
                .to_string();
            let dtype = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflows usize".into()))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor {name:?} shape {shape:?} overflows")))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("payload size overflows".into()))?)?;
            let words = raw.chunks_exact(8).map(|c| c.try_into().expect("8 bytes"));
            let payload = match dtype {
                DTYPE_F64 => Payload::F64(Tensor::new(&shape, words.map(f64::from_le_bytes).collect())?),
                DTYPE_U64 => Payload::U64 {
                    shape,
                    data: words.map(u64::from_le_bytes).collect(),
                },
                other => return Err(Error::Format(format!("unknown dtype code {other}"))),
            };
            tensors.push((name, payload));
        }
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes before the checksum", body.len() - r.pos)));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| with_path(e, dir))?;
        }
        fs::write(path, bytes).map_err(|e| with_path(e, path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| with_path(e, path))?)
    }
}

fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) -> Result<()> {
    put_u32(out, bytes.len())?;
    out.extend_from_slice(bytes);
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("field of {n} bytes runs past the end at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}
