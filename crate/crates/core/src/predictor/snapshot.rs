//! Versioned binary container shared by parameter snapshots and training
//! checkpoints: magic, named text sections, then named f32 tensors, all
//! little-endian.

use std::path::Path;

use diffcalc::Tensor;

use super::config::PredictorConfig;
use super::net::Network;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"OGMPRED1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub sections: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend((v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or("truncated container")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "non-UTF-8 text".to_string())
    }
}

impl Container {
    pub fn section(&self, name: &str) -> Option<&str> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, self.sections.len());
        for (name, text) in &self.sections {
            put_str(&mut out, name);
            put_str(&mut out, text);
        }
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let parse = || -> std::result::Result<Self, String> {
            let mut r = Reader { bytes, pos: 0 };
            if r.take(MAGIC.len())? != MAGIC {
                return Err("not a model container (bad magic)".into());
            }
            let mut c = Container::default();
            for _ in 0..r.u32()? {
                let name = r.string()?;
                c.sections.push((name, r.string()?));
            }
            for _ in 0..r.u32()? {
                let name = r.string()?;
                let ndim = r.u32()?;
                let shape = (0..ndim)
                    .map(|_| r.u32())
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                let n: usize = shape.iter().product();
                let raw = r.take(n.checked_mul(4).ok_or("tensor too large")?)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
                c.tensors.push((name, t));
            }
            if r.pos != bytes.len() {
                return Err("trailing bytes after the last tensor".into());
            }
            Ok(c)
        };
        parse().map_err(|reason| Error::data(path, reason))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub const PREDICTOR_SECTION: &str = "predictor";

impl Network {
    pub fn to_container(&self) -> Container {
        Container {
            sections: vec![(PREDICTOR_SECTION.to_string(), self.cfg.to_text())],
            tensors: self
                .params
                .names
                .iter()
                .cloned()
                .zip(self.params.tensors.iter().cloned())
                .collect(),
        }
    }

    /// Rebuilds a network from the predictor section and the tensors whose
    /// names match its parameters; other tensors are ignored.
    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        let text = c
            .section(PREDICTOR_SECTION)
            .ok_or_else(|| Error::data(path, "missing predictor configuration"))?;
        let cfg = PredictorConfig::parse(text).map_err(|e| Error::data(path, e.to_string()))?;
        let mut net = Network::new(cfg, 0)?;
        for (name, slot) in net.params.names.iter().zip(net.params.tensors.iter_mut()) {
            let (_, t) = c
                .tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::data(path, format!("missing tensor `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::data(
                    path,
                    format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    ),
                ));
            }
            *slot = t.clone();
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?, path)
    }
}
