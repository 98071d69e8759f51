//! Binary checkpoint container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "CNATTN1"
//! header_len, header bytes      UTF-8 `key = value` lines
//! count, count x record         parameters
//! count, count x record         optimizer state
//! record: name_len, name, ndim, dims..., f32 values
//! ```

use std::fs;
use std::path::Path;

use crate::data::parse_key_values;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"CNATTN1";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Record {
    pub fn new(name: impl Into<String>, shape: &[usize], values: &[f64]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data: values.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub header: Vec<(String, String)>,
    pub params: Vec<Record>,
    pub optimizer: Vec<Record>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(u32::try_from(v).expect("fits in u32")).to_le_bytes());
}

fn put_records(out: &mut Vec<u8>, records: &[Record]) {
    put_u32(out, records.len());
    for r in records {
        put_u32(out, r.name.len());
        out.extend_from_slice(r.name.as_bytes());
        put_u32(out, r.shape.len());
        r.shape.iter().for_each(|&d| put_u32(out, d));
        r.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }

    fn records(&mut self) -> Result<Vec<Record>> {
        let count = self.u32()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let n = self.u32()?;
            let name = self.string(n)?;
            let ndim = self.u32()?;
            let shape = (0..ndim).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
            let raw = self.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            out.push(Record { name, shape, data });
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Header value or a checkpoint error naming the key.
    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Checkpoint(format!("header lacks {key:?}")))
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.header.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.header.push((key.to_string(), value)),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut header = String::new();
        for (k, v) in &self.header {
            assert!(!k.contains(['=', '\n', '#']) && !v.contains(['\n', '#']), "unencodable header entry {k:?}");
            header.push_str(&format!("{k} = {v}\n"));
        }
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, header.len());
        out.extend_from_slice(header.as_bytes());
        put_records(&mut out, &self.params);
        put_records(&mut out, &self.optimizer);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.get(..MAGIC.len()) != Some(&MAGIC[..]) {
            return Err(Error::Checkpoint("bad magic (not a CNATTN1 checkpoint)".into()));
        }
        let mut r = Reader { bytes, pos: MAGIC.len() };
        let n = r.u32()?;
        let text = r.string(n)?;
        let header = parse_key_values(&text).map_err(Error::Checkpoint)?;
        let params = r.records()?;
        let optimizer = r.records()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { header, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so an interrupted save never clobbers a good file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

/// One record per stored parameter, in store order.
pub fn store_records(store: &ParamStore) -> Vec<Record> {
    store
        .params()
        .iter()
        .map(|p| Record::new(&p.name, p.value.shape(), p.value.data()))
        .collect()
}

/// Overwrites every parameter of `store` from `records` (matched by name).
pub fn restore_store(store: &mut ParamStore, records: &[Record]) -> Result<()> {
    let ids: Vec<_> = (0..store.len()).map(crate::params::ParamId).collect();
    for id in ids {
        let name = store.name(id).to_string();
        let r = records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        let t = Tensor::new(&r.shape, r.values())
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        store.set(id, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let mut c = Checkpoint::default();
        c.set("vocabulary", "red,blue");
        c.set("epoch", 3);
        c.params.push(Record::new("w", &[2, 1], &[1.5, -0.25]));
        c.optimizer.push(Record::new("w", &[2, 1], &[0.0, 1e-3]));
        let bytes = c.encode();
        assert_eq!(&bytes[..7], b"CNATTN1");
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), c);
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::decode(b"NOTACKPT").is_err());
        assert_eq!(c.require("epoch").unwrap(), "3");
        assert!(c.require("nope").is_err());
    }
}
