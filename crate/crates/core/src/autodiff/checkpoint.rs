//! `PLMC` checkpoint container.
//!
//! Layout (little-endian): magic `PLMC`, u32 version, u32 section count, then
//! per section: u32 name length, name bytes (UTF-8), u32 rank, rank x u32
//! dims, f32 payload. A section named [`META_SECTION`] carries a JSON
//! document, one byte per f32 element, and is written first.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PLMC";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const META_SECTION: &str = "meta.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Option<serde_json::Value>,
    pub sections: Vec<Section>,
}

fn fmt_err(reason: impl Into<String>) -> Error {
    Error::Format { format: "PLMC", reason: reason.into() }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| fmt_err(format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

impl Checkpoint {
    pub fn with_meta(meta: serde_json::Value) -> Self {
        Self { meta: Some(meta), sections: Vec::new() }
    }

    /// Appends every parameter of `store` as a section, in store order.
    pub fn push_params<S: Scalar>(&mut self, store: &ParamStore<S>) {
        for (_, p) in store.iter() {
            self.sections.push(Section {
                name: p.name.clone(),
                dims: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
            });
        }
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// Copies matching sections into `store`. Every parameter must be present
    /// with an identical shape.
    pub fn load_params<S: Scalar>(&self, store: &mut ParamStore<S>) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let name = store.get(id).name.clone();
            let sec = self.section(&name).ok_or_else(|| fmt_err(format!("missing section {name}")))?;
            let shape = store.value(id).shape().to_vec();
            if sec.dims != shape {
                return Err(Error::Shape { op: "checkpoint load", left: shape, right: sec.dims.clone() });
            }
            let t = Tensor::new(shape, sec.data.iter().map(|&v| S::from_f64_lossy(v as f64)).collect())?;
            *store.value_mut(id) = t;
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let meta_section = self.meta.as_ref().map(|m| {
            let bytes = serde_json::to_vec(m).expect("json value serializes");
            Section { name: META_SECTION.into(), dims: vec![bytes.len()], data: bytes.iter().map(|&b| b as f32).collect() }
        });
        let all: Vec<&Section> = meta_section.iter().chain(self.sections.iter()).collect();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(all.len() as u32).to_le_bytes())?;
        for s in all {
            w.write_all(&(s.name.len() as u32).to_le_bytes())?;
            w.write_all(s.name.as_bytes())?;
            w.write_all(&(s.dims.len() as u32).to_le_bytes())?;
            for &d in &s.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(s.data.len() * 4);
            for v in &s.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| fmt_err("missing magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let count = read_u32(r)?;
        let mut out = Checkpoint::default();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|_| fmt_err("truncated name"))?;
            let name = String::from_utf8(name).map_err(|_| fmt_err("section name is not UTF-8"))?;
            let rank = read_u32(r)? as usize;
            let dims = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes).map_err(|_| fmt_err(format!("truncated payload in {name}")))?;
            let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if name == META_SECTION {
                let raw: Vec<u8> = data.iter().map(|&v| v as u8).collect();
                out.meta = Some(serde_json::from_slice(&raw)?);
            } else {
                out.sections.push(Section { name, dims, data });
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}
