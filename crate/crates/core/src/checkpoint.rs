//! The `SMCG` checkpoint container shared by every network in the crate.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes   "SMCG"
//! version    u16       currently 1
//! sections   u32       number of sections
//! per section:
//!   kind     u8        ModuleKind tag
//!   meta_len u32       length of the JSON metadata (architecture, config, counters)
//!   meta     meta_len bytes of UTF-8 JSON
//!   tensors  u32       number of tensors
//!   per tensor:
//!     ndim   u8
//!     dims   ndim × u32
//!     data   prod(dims) × f64
//! crc32      u32       CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Tensors appear in each network's documented parameter order.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use smcyclegan_autograd::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SMCG";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ModuleKind {
    Segmenter = 1,
    GenG = 2,
    GenF = 3,
    DiscX = 4,
    DiscY = 5,
    TrainState = 6,
    FeatureExtractor = 7,
}

impl ModuleKind {
    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => ModuleKind::Segmenter,
            2 => ModuleKind::GenG,
            3 => ModuleKind::GenF,
            4 => ModuleKind::DiscX,
            5 => ModuleKind::DiscY,
            6 => ModuleKind::TrainState,
            7 => ModuleKind::FeatureExtractor,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub kind: ModuleKind,
    pub meta: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Section {
    pub fn new<M: Serialize>(kind: ModuleKind, meta: &M, tensors: Vec<Tensor>) -> Result<Self> {
        let meta = serde_json::to_value(meta).map_err(|e| Error::Checkpoint(format!("meta encode: {e}")))?;
        Ok(Self { kind, meta, tensors })
    }

    pub fn meta<M: DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_value(self.meta.clone()).map_err(|e| Error::Checkpoint(format!("{:?} metadata: {e}", self.kind)))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub sections: Vec<Section>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated container".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Container {
    pub fn new(sections: Vec<Section>) -> Self {
        Self { sections }
    }

    pub fn section(&self, kind: ModuleKind) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.kind == kind)
            .ok_or_else(|| Error::Checkpoint(format!("container has no {kind:?} section")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.push(s.kind as u8);
            let meta = serde_json::to_vec(&s.meta).expect("JSON value always encodes");
            out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
            out.extend_from_slice(&meta);
            out.extend_from_slice(&(s.tensors.len() as u32).to_le_bytes());
            for t in &s.tensors {
                out.push(t.shape().len() as u8);
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 14 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("missing SMCG magic bytes".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("CRC mismatch, container is corrupt".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported container version {version}")));
        }
        let n_sections = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..n_sections {
            let tag = r.u8()?;
            let kind = ModuleKind::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown module kind tag {tag}")))?;
            let meta_len = r.u32()? as usize;
            let meta =
                serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Checkpoint(format!("section metadata: {e}")))?;
            let n_tensors = r.u32()?;
            let mut tensors = Vec::new();
            for _ in 0..n_tensors {
                let ndim = r.u8()? as usize;
                let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let numel: usize = shape.iter().product();
                let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
                let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                tensors.push(Tensor::new(shape, data));
            }
            sections.push(Section { kind, meta, tensors });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after last section".into()));
        }
        Ok(Self { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Check that loaded tensors match the shapes an architecture expects.
pub(crate) fn check_shapes(kind: ModuleKind, tensors: &[Tensor], expected: &[Vec<usize>]) -> Result<()> {
    if tensors.len() != expected.len() {
        return Err(Error::Checkpoint(format!("{kind:?}: expected {} tensors, found {}", expected.len(), tensors.len())));
    }
    for (i, (t, e)) in tensors.iter().zip(expected).enumerate() {
        if t.shape() != e.as_slice() {
            return Err(Error::Checkpoint(format!("{kind:?}: tensor {i} has shape {:?}, expected {e:?}", t.shape())));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let s = Section::new(
            ModuleKind::GenG,
            &serde_json::json!({"base_channels": 4}),
            vec![Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]), Tensor::scalar(7.0)],
        )
        .unwrap();
        Container::new(vec![s])
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"SMCG");
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        bytes[20] ^= 0x40;
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        let truncated = &sample().to_bytes()[..30];
        assert!(Container::from_bytes(truncated).is_err());
        assert!(Container::from_bytes(b"PNG\0garbagegarbage").is_err());
    }

    #[test]
    fn missing_section_is_reported() {
        let c = sample();
        assert!(c.section(ModuleKind::GenG).is_ok());
        assert!(matches!(c.section(ModuleKind::DiscX), Err(Error::Checkpoint(_))));
    }
}
