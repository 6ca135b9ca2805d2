//! `VVT1` tensor container.
//!
//! ```text
//! "VVT1" | u32 record count | record table | payload
//! record = u32 name_len | name | u8 dtype | u32 ndim | u64 dims[ndim]
//!        | u64 offset | u64 byte_len | u32 crc32
//! ```
//! All integers are little-endian; offsets are absolute file positions and
//! every payload slice is covered by its CRC32.

use std::collections::HashSet;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"VVT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    I32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::I32 => 2,
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 | DType::I32 => 4,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::I32),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl RecordData {
    pub fn dtype(&self) -> DType {
        match self {
            RecordData::F32(_) => DType::F32,
            RecordData::F64(_) => DType::F64,
            RecordData::I32(_) => DType::I32,
        }
    }

    fn len(&self) -> usize {
        match self {
            RecordData::F32(v) => v.len(),
            RecordData::F64(v) => v.len(),
            RecordData::I32(v) => v.len(),
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * self.dtype().size());
        match self {
            RecordData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RecordData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RecordData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    fn from_bytes(dtype: DType, b: &[u8]) -> Self {
        match dtype {
            DType::F32 => {
                RecordData::F32(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            DType::F64 => {
                RecordData::F64(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
            }
            DType::I32 => {
                RecordData::I32(b.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: RecordData,
}

/// An ordered set of uniquely named records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    records: Vec<Record>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: RecordData) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::invalid("container", format!("duplicate record `{name}`")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::invalid(
                "container",
                format!("record `{name}` has shape {shape:?} but {} values", data.len()),
            ));
        }
        self.records.push(Record { name, shape, data });
        Ok(())
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        self.push(name, t.shape().to_vec(), RecordData::F64(t.to_vec()))
    }

    pub fn push_i32(&mut self, name: impl Into<String>, values: Vec<i32>) -> Result<()> {
        let n = values.len();
        self.push(name, vec![n], RecordData::I32(values))
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    fn require(&self, name: &str) -> Result<&Record> {
        self.get(name).ok_or_else(|| Error::invalid("container", format!("no record named `{name}`")))
    }

    /// Reads a record as an f64 tensor (f32 records are widened).
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let r = self.require(name)?;
        let data = match &r.data {
            RecordData::F64(v) => v.clone(),
            RecordData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            RecordData::I32(_) => return Err(Error::invalid("container", format!("`{name}` is an integer record"))),
        };
        Ok(Tensor::new(r.shape.clone(), data)?)
    }

    pub fn i32s(&self, name: &str) -> Result<&[i32]> {
        match &self.require(name)?.data {
            RecordData::I32(v) => Ok(v),
            _ => Err(Error::invalid("container", format!("`{name}` is not an integer record"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let table_len: usize =
            self.records.iter().map(|r| 4 + r.name.len() + 1 + 4 + 8 * r.shape.len() + 8 + 8 + 4).sum();
        let mut offset = (MAGIC.len() + 4 + table_len) as u64;
        let payloads: Vec<Vec<u8>> = self.records.iter().map(|r| r.data.to_bytes()).collect();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(self.records.len() as u32).unwrap();
        for (r, p) in self.records.iter().zip(&payloads) {
            out.write_u32::<LittleEndian>(r.name.len() as u32).unwrap();
            out.extend_from_slice(r.name.as_bytes());
            out.write_u8(r.data.dtype().code()).unwrap();
            out.write_u32::<LittleEndian>(r.shape.len() as u32).unwrap();
            for &d in &r.shape {
                out.write_u64::<LittleEndian>(d as u64).unwrap();
            }
            out.write_u64::<LittleEndian>(offset).unwrap();
            out.write_u64::<LittleEndian>(p.len() as u64).unwrap();
            out.write_u32::<LittleEndian>(crc32fast::hash(p)).unwrap();
            offset += p.len() as u64;
        }
        for p in payloads {
            out.extend_from_slice(&p);
        }
        out
    }

    /// Parses a container; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |offset: u64, msg: String| Error::Corrupt { path: path.to_path_buf(), offset, msg };
        let mut cur = Cursor::new(bytes);
        let eof = |cur: &Cursor<&[u8]>, what: &str| Error::Corrupt {
            path: path.to_path_buf(),
            offset: cur.position(),
            msg: format!("unexpected end of file reading {what}"),
        };
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(|_| eof(&cur, "magic"))?;
        if &magic != MAGIC {
            return Err(corrupt(0, format!("bad magic {magic:?}")));
        }
        let count = cur.read_u32::<LittleEndian>().map_err(|_| eof(&cur, "record count"))?;
        struct Entry {
            name: String,
            dtype: DType,
            shape: Vec<usize>,
            offset: u64,
            len: u64,
            crc: u32,
            at: u64,
        }
        let mut entries = Vec::new();
        for _ in 0..count {
            let at = cur.position();
            let name_len = cur.read_u32::<LittleEndian>().map_err(|_| eof(&cur, "name length"))? as usize;
            if name_len > bytes.len() {
                return Err(corrupt(at, format!("name length {name_len} exceeds file size")));
            }
            let mut name = vec![0u8; name_len];
            cur.read_exact(&mut name).map_err(|_| eof(&cur, "record name"))?;
            let name = String::from_utf8(name).map_err(|_| corrupt(at + 4, "record name is not UTF-8".into()))?;
            let code = cur.read_u8().map_err(|_| eof(&cur, "dtype"))?;
            let dtype =
                DType::from_code(code).ok_or_else(|| corrupt(cur.position() - 1, format!("unknown dtype {code}")))?;
            let ndim = cur.read_u32::<LittleEndian>().map_err(|_| eof(&cur, "rank"))? as usize;
            if ndim > 16 {
                return Err(corrupt(cur.position() - 4, format!("rank {ndim} is implausible")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.read_u64::<LittleEndian>().map_err(|_| eof(&cur, "dims"))? as usize);
            }
            let offset = cur.read_u64::<LittleEndian>().map_err(|_| eof(&cur, "offset"))?;
            let len = cur.read_u64::<LittleEndian>().map_err(|_| eof(&cur, "byte length"))?;
            let crc = cur.read_u32::<LittleEndian>().map_err(|_| eof(&cur, "crc"))?;
            entries.push(Entry { name, dtype, shape, offset, len, crc, at });
        }
        let table_end = cur.position();
        let mut names = HashSet::new();
        let mut spans: Vec<(u64, u64)> = Vec::new();
        let mut records = Vec::with_capacity(entries.len());
        for e in entries {
            if !names.insert(e.name.clone()) {
                return Err(corrupt(e.at, format!("duplicate record `{}`", e.name)));
            }
            let numel = e.shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d as u64));
            if numel.and_then(|n| n.checked_mul(e.dtype.size() as u64)) != Some(e.len) {
                return Err(corrupt(
                    e.at,
                    format!("`{}`: byte length {} does not match shape {:?}", e.name, e.len, e.shape),
                ));
            }
            let end = e.offset.checked_add(e.len).filter(|&end| e.offset >= table_end && end <= bytes.len() as u64);
            let Some(end) = end else {
                return Err(corrupt(
                    e.offset.min(bytes.len() as u64),
                    format!(
                        "`{}`: payload [{}, +{}) lies outside the file of {} bytes",
                        e.name,
                        e.offset,
                        e.len,
                        bytes.len()
                    ),
                ));
            };
            if spans.iter().any(|&(s, t)| e.offset < t && s < end) {
                return Err(corrupt(e.offset, format!("`{}`: payload overlaps another record", e.name)));
            }
            spans.push((e.offset, end));
            let payload = &bytes[e.offset as usize..end as usize];
            if crc32fast::hash(payload) != e.crc {
                return Err(corrupt(e.offset, format!("`{}`: CRC mismatch", e.name)));
            }
            records.push(Record { name: e.name, shape: e.shape, data: RecordData::from_bytes(e.dtype, payload) });
        }
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp: PathBuf = path.with_extension("vvt.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Missing { what: "container file", path: path.to_path_buf() }
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_bytes(&bytes, path)
    }
}
