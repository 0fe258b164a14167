//! Flat binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"GFCKPT\0\0"
//! version u8 (= 1)
//! meta    u32 length + UTF-8 bytes (free-form, usually JSON)
//! count   u32
//! record  u32 name length, name bytes, u8 trainable, u32 ndim,
//!         u64 per dim, f64 values in row-major order
//! ```

use std::io::{Read, Write};

use crate::error::{AutodiffError, Result};
use crate::nn::{Param, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GFCKPT\0\0";
pub const VERSION: u8 = 1;

fn bad(msg: impl Into<String>) -> AutodiffError {
    AutodiffError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore, metadata: &str) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(metadata.len() as u32).to_le_bytes())?;
    w.write_all(metadata.as_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for p in store.params() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&[p.trainable as u8])?;
        w.write_all(&(p.value.ndim() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Parse a checkpoint into its metadata string and parameter records.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(String, Vec<Param>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a gearfault checkpoint (bad magic)"));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != VERSION {
        return Err(bad(format!("unsupported checkpoint version {}", version[0])));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let metadata = String::from_utf8(meta).map_err(|_| bad("metadata is not UTF-8"))?;
    let count = read_u32(&mut r)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel = shape.iter().product::<usize>().max(1);
        let mut raw = vec![0u8; numel * 8];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.push(Param { name, value: Tensor::new(&shape, data)?, trainable: flag[0] != 0 });
    }
    Ok((metadata, params))
}

impl ParamStore {
    /// Overwrite values from checkpoint records; names, order and shapes must match.
    pub fn load_values(&mut self, records: Vec<Param>) -> Result<()> {
        if records.len() != self.len() {
            return Err(bad(format!("checkpoint has {} parameters, model has {}", records.len(), self.len())));
        }
        for (p, rec) in self.params().iter().zip(&records) {
            if p.name != rec.name || p.value.shape() != rec.value.shape() {
                return Err(bad(format!(
                    "parameter mismatch: model {} {:?} vs checkpoint {} {:?}",
                    p.name,
                    p.value.shape(),
                    rec.name,
                    rec.value.shape()
                )));
            }
        }
        for (p, rec) in self.params_mut().iter_mut().zip(records) {
            p.value = rec.value;
        }
        Ok(())
    }
}
