//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian `u32`, all values little-endian `f32`):
//!
//! ```text
//! magic     8 bytes  "GLYCKPT\0"
//! version   u32      1
//! n_meta    u32
//!   key_len u32, key UTF-8, val_len u32, val UTF-8        (sorted by key)
//! n_tensor  u32
//!   name_len u32, name UTF-8, ndim u32, dims u32 × ndim,
//!   values f32 × product(dims)                            (sorted by name)
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamStore, Real, Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GLYCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore<f32>,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| bad(format!("value {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)?;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| bad("string is not UTF-8"))
}

impl Checkpoint {
    pub fn from_params<T: Real>(params: &ParamStore<T>, meta: BTreeMap<String, String>) -> Self {
        Self { meta, params: params.cast() }
    }

    pub fn to_params<T: Real>(&self) -> ParamStore<T> {
        self.params.cast()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_u32(w, self.meta.len())?;
        for (k, v) in &self.meta {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        write_u32(w, self.params.len())?;
        for (name, t) in self.params.iter() {
            write_str(w, name)?;
            write_u32(w, t.shape().len())?;
            for &d in t.shape() {
                write_u32(w, d)?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..read_u32(r)? {
            let k = read_str(r)?;
            let v = read_str(r)?;
            meta.insert(k, v);
        }
        let mut params = ParamStore::new();
        for _ in 0..read_u32(r)? {
            let name = read_str(r)?;
            let ndim = read_u32(r)?;
            let shape = (0..ndim).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 4];
            r.read_exact(&mut raw)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
            params.insert(name, t);
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
