//! Binary checkpoints.
//!
//! Layout: magic, format version, the config as TOML, the completed step
//! count, then three name-keyed tensor tables (parameters, first and
//! second optimizer moments). Maps iterate in key order and the config
//! serializer is stable, so save -> load -> save is byte-identical.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use cdscene_tensor::ParamStore;

use crate::config::{annotate, ModelConfig};
use crate::error::{Error, Result};
use crate::model::Model;

const MAGIC: &[u8; 4] = b"CDCK";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: BTreeMap<String, ArrayD<f64>>,
    pub opt_m: BTreeMap<String, ArrayD<f64>>,
    pub opt_v: BTreeMap<String, ArrayD<f64>>,
    /// Optimizer steps completed before this snapshot.
    pub step: u64,
}

fn put_table(out: &mut Vec<u8>, table: &BTreeMap<String, ArrayD<f64>>) {
    out.extend_from_slice(&(table.len() as u64).to_le_bytes());
    for (name, value) in table {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(value.ndim() as u8);
        for d in value.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for x in value.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Truncated {
                expected: self.at + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn table(&mut self) -> Result<BTreeMap<String, ArrayD<f64>>> {
        let count = self.u64()? as usize;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let name_len = self.u16()? as usize;
            let name = String::from_utf8(self.take(name_len)?.to_vec())
                .map_err(|_| Error::Invalid("checkpoint name is not utf-8".into()))?;
            let ndim = self.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(self.u64()? as usize);
            }
            let n: usize = dims.iter().product();
            let raw = self.take(n * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| Error::Invalid(format!("checkpoint tensor {name}: {e}")))?;
            out.insert(name, arr);
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.to_toml_string()?;
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_table(&mut out, &self.params);
        put_table(&mut out, &self.opt_m);
        put_table(&mut out, &self.opt_v);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::BadVersion(version));
        }
        let cfg_len = r.u64()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| Error::Invalid("checkpoint config is not utf-8".into()))?;
        let config = ModelConfig::from_toml_str(cfg_text)?;
        let step = r.u64()?;
        let params = r.table()?;
        let opt_m = r.table()?;
        let opt_v = r.table()?;
        if r.at != bytes.len() {
            return Err(Error::Invalid(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - r.at
            )));
        }
        Ok(Self {
            config,
            params,
            opt_m,
            opt_v,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| annotate(e, path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| annotate(e, path))?;
        Self::decode(&bytes)
    }

    /// Reinstate the model around the stored parameters.
    pub fn model(&self) -> Result<Model> {
        let mut store = ParamStore::new();
        for (name, value) in &self.params {
            store.insert(name.clone(), value.clone());
        }
        Model::from_parts(self.config.clone(), Rc::new(RefCell::new(store)))
    }
}
