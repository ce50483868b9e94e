//! Binary model checkpoints.
//!
//! Layout (little endian): `"PRFM"`, u32 version, u32 config length and the
//! model config as `key=value` text, u32 block count, then per block a u32
//! name length and name bytes, u32 rank, rank × u32 extents and the f64 data.

use std::path::Path;

use prfusion_tensor::Tensor;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::Parameterized;

pub const MAGIC: &[u8; 4] = b"PRFM";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model.config.to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let params = model.named_params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in &params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic, expected PRFM".into(),
        });
    }
    let version = c.u32("version")?;
    if version as u32 != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let len = c.u32("config length")?;
    let at = c.pos;
    let text = std::str::from_utf8(c.take(len, "config")?).map_err(|_| Error::Format {
        offset: at as u64,
        reason: "config block is not UTF-8".into(),
    })?;
    let config = ModelConfig::from_text(text).map_err(|e| Error::Format {
        offset: at as u64,
        reason: e.to_string(),
    })?;
    let mut model = Model::new(config)?;

    let count = c.u32("block count")?;
    let mut blocks = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let start = c.pos;
        let name_len = c.u32("name length")?;
        let name = String::from_utf8(c.take(name_len, "name")?.to_vec()).map_err(|_| c.fail("parameter name is not UTF-8"))?;
        let rank = c.u32("rank")?;
        let shape: Vec<usize> = (0..rank).map(|_| c.u32("extent")).collect::<Result<_>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| c.fail("shape overflows"))?;
        let raw = c.take(numel.checked_mul(8).ok_or_else(|| c.fail("shape overflows"))?, "parameter data")?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        if blocks.insert(name.clone(), (start, shape, data)).is_some() {
            return Err(Error::Format {
                offset: start as u64,
                reason: format!("duplicate parameter {name}"),
            });
        }
    }
    if c.pos != bytes.len() {
        return Err(c.fail("trailing bytes after the last block"));
    }

    let mut problem: Option<Error> = None;
    model.visit_mut("", &mut |name, t| {
        if problem.is_some() {
            return;
        }
        let name = name.trim_start_matches('.');
        problem = match blocks.remove(name) {
            Some((_, shape, data)) if shape == t.shape() => match Tensor::param(data, &shape) {
                Ok(p) => {
                    *t = p;
                    None
                }
                Err(e) => Some(e.into()),
            },
            Some((start, shape, _)) => Some(Error::Format {
                offset: start as u64,
                reason: format!("{name} has shape {shape:?}, model expects {:?}", t.shape()),
            }),
            None => Some(Error::Format {
                offset: bytes.len() as u64,
                reason: format!("missing parameter {name}"),
            }),
        };
    });
    if let Some(e) = problem {
        return Err(e);
    }
    if let Some((name, (start, _, _))) = blocks.into_iter().min_by_key(|(_, b)| b.0) {
        return Err(Error::Format {
            offset: start as u64,
            reason: format!("unexpected parameter {name}"),
        });
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
