//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic    8 bytes  "WUNENG01"
//! version  u32
//! config   u32 length + UTF-8 key=value lines (includes d_cat)
//! count    u32
//! tensor*  u32 name length, name, u8 rank, rank × u64 dims, f64 payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor;
use crate::params::ParamSet;

pub const MAGIC: &[u8; 8] = b"WUNENG01";
pub const VERSION: u32 = 1;

pub fn encode(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model.cfg.to_kv();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let names = model.params.names();
    out.extend_from_slice(&(names.len() as u32).to_le_bytes());
    model.params.visit(&mut |name, t| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    out
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &dyn Fn() -> String) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated { what: what() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &dyn Fn() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &dyn Fn() -> String) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Loads a checkpoint and validates it against its embedded config.
pub fn load(path: &Path) -> Result<Model> {
    decode(&fs::read(path)?, path, None)
}

/// Loads a checkpoint into the layout of `expected`, rejecting tensors whose
/// shapes differ.
pub fn load_as(path: &Path, expected: &ModelConfig) -> Result<Model> {
    decode(&fs::read(path)?, path, Some(expected))
}

pub fn decode(bytes: &[u8], path: &Path, expected: Option<&ModelConfig>) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r
        .take(8, &|| "magic".into())
        .map_err(|_| Error::BadMagic { path: path.into() })?;
    if magic != MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    let version = r.u32(&|| "version".into())?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let cfg_len = r.u32(&|| "config length".into())? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len, &|| "config".into())?)
        .map_err(|_| Error::Malformed("config is not UTF-8".into()))?;
    let stored = ModelConfig::from_kv(cfg_text)?;
    let cfg = expected.copied().unwrap_or(stored);
    let mut model = Model::init(cfg)?;

    let count = r.u32(&|| "tensor count".into())? as usize;
    let expected_names = model.params.names();
    if count != expected_names.len() {
        return Err(Error::Malformed(format!(
            "{count} tensors stored, config describes {}",
            expected_names.len()
        )));
    }
    let mut loaded = Vec::with_capacity(count);
    for (i, want) in expected_names.iter().enumerate() {
        let name_len = r.u32(&|| format!("name of tensor #{i}"))? as usize;
        let name = std::str::from_utf8(r.take(name_len, &|| format!("name of tensor #{i}"))?)
            .map_err(|_| Error::Malformed(format!("name of tensor #{i} is not UTF-8")))?
            .to_string();
        if &name != want {
            return Err(Error::Malformed(format!("tensor #{i} is `{name}`, expected `{want}`")));
        }
        let rank = r.take(1, &|| format!("rank of `{name}`"))?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64(&|| format!("dims of `{name}`"))? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = r.take(n * 8, &|| format!("payload of `{name}`"))?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        loaded.push((name, dims, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut it = loaded.into_iter();
    let mut failure = None;
    model.params.visit_mut(&mut |name, t| {
        let (_, dims, data) = it.next().expect("counted above");
        if failure.is_some() {
            return;
        }
        if dims != t.dims() {
            failure = Some(Error::CheckpointShape {
                name: name.to_string(),
                expected: t.dims().to_vec(),
                found: dims,
            });
            return;
        }
        match Tensor::new(dims, data) {
            Ok(v) => *t = v,
            Err(e) => failure = Some(e),
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(model),
    }
}
