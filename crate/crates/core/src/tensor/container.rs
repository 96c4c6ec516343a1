//! Binary tensor container shared by checkpoints and datasets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "BEEF" | version: u32 | entry count: u32
//! per entry: name len: u16 | UTF-8 name | dtype: u8 | rank: u8 | dims: u32 * rank | raw data
//! ```
//!
//! dtype codes: 0 = f32, 1 = f64, 2 = i64. Entries keep their insertion
//! order so that write -> read -> write is byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use super::{DType, Element, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BEEF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    I64 { shape: Vec<usize>, data: Vec<i64> },
}

impl Entry {
    pub fn dtype(&self) -> DType {
        match self {
            Entry::F32(_) => DType::F32,
            Entry::F64(_) => DType::F64,
            Entry::I64 { .. } => DType::I64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Entry::F32(t) => t.shape(),
            Entry::F64(t) => t.shape(),
            Entry::I64 { shape, .. } => shape,
        }
    }

    pub fn i64s(data: Vec<i64>) -> Self {
        Entry::I64 {
            shape: vec![data.len()],
            data,
        }
    }

    /// Stores a UTF-8 string as one i64 per byte.
    pub fn text(s: &str) -> Self {
        Entry::i64s(s.bytes().map(i64::from).collect())
    }

    pub fn as_text(&self) -> Option<String> {
        match self {
            Entry::I64 { data, .. } => {
                let bytes: Option<Vec<u8>> = data.iter().map(|&b| u8::try_from(b).ok()).collect();
                String::from_utf8(bytes?).ok()
            }
            _ => None,
        }
    }

    /// Converts a floating entry to the requested element type.
    pub fn to_tensor<T: Element>(&self) -> Option<Tensor<T>> {
        match self {
            Entry::F32(t) => Some(t.cast()),
            Entry::F64(t) => Some(t.cast()),
            Entry::I64 { .. } => None,
        }
    }
}

impl<T: Element> From<&Tensor<T>> for Entry {
    fn from(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F64 => Entry::F64(t.cast()),
            _ => Entry::F32(t.cast()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, Entry)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry, replacing any existing entry of the same name in place.
    pub fn insert(&mut self, name: impl Into<String>, entry: Entry) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = entry,
            None => self.entries.push((name, entry)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing entry `{name}`")))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len())
            .map_err(|_| Error::Format("too many entries".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, entry) in &self.entries {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("entry name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(entry.dtype().code());
            let shape = entry.shape();
            let rank =
                u8::try_from(shape.len()).map_err(|_| Error::Format(format!("rank too large: {name}")))?;
            out.push(rank);
            for &d in shape {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Format(format!("dimension too large: {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            match entry {
                Entry::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                Entry::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                Entry::I64 { data, .. } => data
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut container = Container::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let code = r.u8()?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Format(format!("unknown dtype code {code} for `{name}`")))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * dtype.width())?;
            let entry = match dtype {
                DType::F32 => Entry::F32(Tensor::new(
                    &shape,
                    raw.chunks_exact(4).map(f32::read_le).collect(),
                )?),
                DType::F64 => Entry::F64(Tensor::new(
                    &shape,
                    raw.chunks_exact(8).map(f64::read_le).collect(),
                )?),
                DType::I64 => Entry::I64 {
                    shape,
                    data: raw
                        .chunks_exact(8)
                        .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                },
            };
            container.entries.push((name, entry));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(container)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of data".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn write_container(path: &Path, container: &Container) -> Result<()> {
    let bytes = container.to_bytes()?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Container> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Container::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.insert(
            "a.weight",
            Entry::F32(Tensor::from_f64(&[2, 2], &[1.0, -2.0, 3.5, 0.25]).unwrap()),
        );
        c.insert("b", Entry::F64(Tensor::scalar(std::f64::consts::PI)));
        c.insert("labels", Entry::i64s(vec![0, 3, -1]));
        c
    }

    #[test]
    fn header_layout_is_exact() {
        let mut c = Container::new();
        c.insert("x", Entry::F32(Tensor::vector(vec![1.0f32])));
        let bytes = c.to_bytes().unwrap();
        let mut expected = b"BEEF".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.push(b'x');
        expected.push(0);
        expected.push(1);
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn write_read_write_is_byte_identical() {
        let bytes = sample().to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = sample().to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(Container::from_bytes(&bytes).is_err());
    }

    #[test]
    fn text_entries_round_trip() {
        let e = Entry::text("{\"k\": \"välue\"}");
        assert_eq!(e.as_text().unwrap(), "{\"k\": \"välue\"}");
    }
}
