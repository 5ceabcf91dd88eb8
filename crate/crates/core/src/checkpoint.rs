//! ASPC v1: versioned binary container of length-prefixed named records.
//!
//! Layout: magic `ASPC`, u32 version, u32 record count, then records sorted
//! by name. Each record: u32 name length, name bytes, u32 kind, payload.
//! Kinds: 0 = f32 tensor (u32 rank, dims, data), 1 = u32 list, 2 = utf8
//! string, 3 = u64 list. All integers and floats little-endian.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ASPC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Tensor(Tensor<f32>),
    U32s(Vec<u32>),
    Str(String),
    U64s(Vec<u64>),
}

/// Named-record container with deterministic byte layout.
#[derive(Debug, Default, Clone)]
pub struct Container {
    records: BTreeMap<String, Record>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(|s| s.as_str())
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.records.insert(name.into(), Record::Tensor(t));
    }

    pub fn put_u32s(&mut self, name: impl Into<String>, v: Vec<u32>) {
        self.records.insert(name.into(), Record::U32s(v));
    }

    pub fn put_str(&mut self, name: impl Into<String>, s: impl Into<String>) {
        self.records.insert(name.into(), Record::Str(s.into()));
    }

    pub fn put_u64s(&mut self, name: impl Into<String>, v: Vec<u64>) {
        self.records.insert(name.into(), Record::U64s(v));
    }

    fn get(&self, name: &str) -> Result<&Record> {
        self.records
            .get(name)
            .ok_or_else(|| CoreError::contract(format!("checkpoint record '{name}' missing")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.get(name)? {
            Record::Tensor(t) => Ok(t),
            _ => Err(CoreError::contract(format!("record '{name}' is not a tensor"))),
        }
    }

    pub fn u32s(&self, name: &str) -> Result<&[u32]> {
        match self.get(name)? {
            Record::U32s(v) => Ok(v),
            _ => Err(CoreError::contract(format!("record '{name}' is not u32s"))),
        }
    }

    pub fn str_(&self, name: &str) -> Result<&str> {
        match self.get(name)? {
            Record::Str(s) => Ok(s),
            _ => Err(CoreError::contract(format!("record '{name}' is not a string"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name)? {
            Record::U64s(v) => Ok(v),
            _ => Err(CoreError::contract(format!("record '{name}' is not u64s"))),
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.records.contains_key(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, rec) in &self.records {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            match rec {
                Record::Tensor(t) => {
                    buf.extend_from_slice(&0u32.to_le_bytes());
                    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                    for &d in t.shape() {
                        buf.extend_from_slice(&(d as u32).to_le_bytes());
                    }
                    for &v in t.data() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Record::U32s(v) => {
                    buf.extend_from_slice(&1u32.to_le_bytes());
                    buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
                    for &x in v {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Record::Str(s) => {
                    buf.extend_from_slice(&2u32.to_le_bytes());
                    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
                    buf.extend_from_slice(s.as_bytes());
                }
                Record::U64s(v) => {
                    buf.extend_from_slice(&3u32.to_le_bytes());
                    buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
                    for &x in v {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        buf
    }

    pub fn from_bytes(raw: &[u8]) -> Result<Self> {
        struct Cur<'a> {
            buf: &'a [u8],
            pos: u64,
        }
        impl<'a> Cur<'a> {
            fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
                if self.pos as usize + n > self.buf.len() {
                    return Err(CoreError::format(
                        self.pos,
                        format!("truncated: need {n} bytes for {what}"),
                    ));
                }
                let s = &self.buf[self.pos as usize..self.pos as usize + n];
                self.pos += n as u64;
                Ok(s)
            }
            fn u32(&mut self, what: &str) -> Result<u32> {
                Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
            }
        }
        let mut cur = Cur { buf: raw, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != MAGIC {
            return Err(CoreError::format(0, format!("bad magic {magic:?}, expected ASPC")));
        }
        let version = cur.u32("version")?;
        if version != VERSION {
            return Err(CoreError::format(4, format!("unsupported version {version}")));
        }
        let count = cur.u32("record count")? as usize;
        let mut records = BTreeMap::new();
        for _ in 0..count {
            let name_len = cur.u32("name length")? as usize;
            let name = String::from_utf8(cur.take(name_len, "name")?.to_vec())
                .map_err(|e| CoreError::format(cur.pos, format!("invalid record name: {e}")))?;
            let kind = cur.u32("kind")?;
            let rec = match kind {
                0 => {
                    let rank = cur.u32("rank")? as usize;
                    let mut shape = Vec::with_capacity(rank);
                    for _ in 0..rank {
                        shape.push(cur.u32("dim")? as usize);
                    }
                    let numel: usize = shape.iter().product();
                    let bytes = cur.take(numel * 4, "tensor data")?;
                    let data = bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Record::Tensor(Tensor::new(shape, data).map_err(|e| {
                        CoreError::format(cur.pos, format!("bad tensor '{name}': {e}"))
                    })?)
                }
                1 => {
                    let n = cur.u32("u32 count")? as usize;
                    let bytes = cur.take(n * 4, "u32 data")?;
                    Record::U32s(
                        bytes
                            .chunks_exact(4)
                            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                2 => {
                    let n = cur.u32("string length")? as usize;
                    let s = String::from_utf8(cur.take(n, "string data")?.to_vec())
                        .map_err(|e| CoreError::format(cur.pos, format!("invalid utf8: {e}")))?;
                    Record::Str(s)
                }
                3 => {
                    let n = cur.u32("u64 count")? as usize;
                    let bytes = cur.take(n * 8, "u64 data")?;
                    Record::U64s(
                        bytes
                            .chunks_exact(8)
                            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                k => {
                    return Err(CoreError::format(
                        cur.pos - 4,
                        format!("unknown record kind {k} for '{name}'"),
                    ))
                }
            };
            records.insert(name, rec);
        }
        if (cur.pos as usize) != raw.len() {
            return Err(CoreError::format(cur.pos, "trailing bytes after records"));
        }
        Ok(Container { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut raw = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut raw)?;
        Self::from_bytes(&raw)
    }
}
