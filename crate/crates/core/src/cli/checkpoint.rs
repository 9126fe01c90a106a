//! Portable binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"ERLKIT"  u32 version  u32 id_len  id bytes  u64 segment_count
//! per segment: u32 name_len  name bytes  u8 kind (0 = f64, 1 = u64)  u64 count  count x 8 bytes
//! ```
//!
//! A file is parsed completely before any state is built from it, so a damaged
//! file never yields a partial state.

use std::path::Path;

use crate::error::{Error, Result};
use crate::exec::RngKey;

pub const MAGIC: &[u8; 6] = b"ERLKIT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum SegmentData {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

/// Named segments tagged with the workflow that wrote them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub workflow: String,
    segments: Vec<(String, SegmentData)>,
}

impl Checkpoint {
    pub fn new(workflow: &str) -> Self {
        Checkpoint {
            workflow: workflow.to_string(),
            segments: Vec::new(),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().map(|(n, _)| n.as_str())
    }

    fn put(&mut self, name: &str, data: SegmentData) {
        if let Some(slot) = self.segments.iter_mut().find(|(n, _)| n == name) {
            slot.1 = data;
        } else {
            self.segments.push((name.to_string(), data));
        }
    }

    /// Copies every segment of `other` under `prefix`.
    pub fn put_nested(&mut self, prefix: &str, other: &Checkpoint) {
        for (n, d) in &other.segments {
            self.put(&format!("{prefix}{n}"), d.clone());
        }
    }

    /// The segments under `prefix`, with the prefix stripped.
    pub fn nested(&self, prefix: &str) -> Checkpoint {
        Checkpoint {
            workflow: self.workflow.clone(),
            segments: self
                .segments
                .iter()
                .filter_map(|(n, d)| n.strip_prefix(prefix).map(|m| (m.to_string(), d.clone())))
                .collect(),
        }
    }

    pub fn put_f64s(&mut self, name: &str, v: &[f64]) {
        self.put(name, SegmentData::F64(v.to_vec()));
    }

    pub fn put_u64s(&mut self, name: &str, v: &[u64]) {
        self.put(name, SegmentData::U64(v.to_vec()));
    }

    pub fn put_f64(&mut self, name: &str, v: f64) {
        self.put_f64s(name, &[v]);
    }

    pub fn put_u64(&mut self, name: &str, v: u64) {
        self.put_u64s(name, &[v]);
    }

    pub fn put_bools(&mut self, name: &str, v: &[bool]) {
        let raw: Vec<u64> = v.iter().map(|&b| u64::from(b)).collect();
        self.put_u64s(name, &raw);
    }

    pub fn put_key(&mut self, name: &str, key: RngKey) {
        let v = key.to_u128();
        self.put_u64s(name, &[(v >> 64) as u64, v as u64]);
    }

    fn get(&self, name: &str) -> Result<&SegmentData> {
        self.segments
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d)
            .ok_or_else(|| Error::Checkpoint(format!("missing segment `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.segments.iter().any(|(n, _)| n == name)
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match self.get(name)? {
            SegmentData::F64(v) => Ok(v),
            SegmentData::U64(_) => Err(Error::Checkpoint(format!("segment `{name}` is not f64"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name)? {
            SegmentData::U64(v) => Ok(v),
            SegmentData::F64(_) => Err(Error::Checkpoint(format!("segment `{name}` is not u64"))),
        }
    }

    /// `f64` segment of exactly `len` values.
    pub fn f64s_len(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        let v = self.f64s(name)?;
        if v.len() != len {
            return Err(Error::Checkpoint(format!(
                "segment `{name}` holds {} values, expected {len}",
                v.len()
            )));
        }
        Ok(v.to_vec())
    }

    pub fn f64(&self, name: &str) -> Result<f64> {
        Ok(self.f64s_len(name, 1)?[0])
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.u64s(name)? {
            [v] => Ok(*v),
            _ => Err(Error::Checkpoint(format!("segment `{name}` is not a scalar"))),
        }
    }

    pub fn bools(&self, name: &str) -> Result<Vec<bool>> {
        self.u64s(name)?
            .iter()
            .map(|&v| match v {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::Checkpoint(format!("segment `{name}` is not boolean"))),
            })
            .collect()
    }

    pub fn key(&self, name: &str) -> Result<RngKey> {
        match self.u64s(name)? {
            [hi, lo] => Ok(RngKey::from_u128(((*hi as u128) << 64) | *lo as u128)),
            _ => Err(Error::Checkpoint(format!("segment `{name}` is not a key"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.workflow.len() as u32).to_le_bytes());
        out.extend_from_slice(self.workflow.as_bytes());
        out.extend_from_slice(&(self.segments.len() as u64).to_le_bytes());
        for (name, data) in &self.segments {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match data {
                SegmentData::F64(v) => {
                    out.push(0);
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                SegmentData::U64(v) => {
                    out.push(1);
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    /// Parses and validates a checkpoint; `expected_workflow` is checked when given.
    pub fn from_bytes(bytes: &[u8], expected_workflow: Option<&str>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(6)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {VERSION}"
            )));
        }
        let id_len = r.u32()? as usize;
        let workflow = r.string(id_len)?;
        if let Some(w) = expected_workflow {
            if w != workflow {
                return Err(Error::Checkpoint(format!(
                    "checkpoint belongs to workflow `{workflow}`, not `{w}`"
                )));
            }
        }
        let count = r.u64()?;
        let mut segments = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            let kind = r.take(1)?[0];
            let n = r.u64()? as usize;
            let raw = r.take(n.checked_mul(8).ok_or_else(truncated)?)?;
            let words = raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()));
            let data = match kind {
                0 => SegmentData::F64(words.map(f64::from_bits).collect()),
                1 => SegmentData::U64(words.collect()),
                k => return Err(Error::Checkpoint(format!("unknown segment kind {k}"))),
            };
            segments.push((name, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { workflow, segments })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, expected_workflow: Option<&str>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_bytes(&bytes, expected_workflow)
    }
}

fn truncated() -> Error {
    Error::Checkpoint("truncated file".into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or_else(truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("segment name is not UTF-8".into()))
    }
}
