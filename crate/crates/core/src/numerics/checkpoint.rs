//! Binary checkpoint container.
//!
//! Layout, all integers little-endian `u64`, all scalars little-endian IEEE
//! `f64`:
//!
//! ```text
//! magic        8 bytes  "HIPADCK1"
//! meta_len     u64      length of the metadata block
//! meta         bytes    UTF-8 JSON (run config, granularity layout, ...)
//! count        u64      number of tensors
//! per tensor:
//!   name_len   u64
//!   name       bytes    UTF-8
//!   trainable  u8       1 = parameter, 0 = buffer
//!   ndim       u64
//!   dims       ndim × u64
//!   data       prod(dims) × f64
//! ```
//!
//! Tensors are written in store order, so a save/load round trip is
//! bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::nn::ParamStore;
use crate::numerics::tensor::Tensor;

const MAGIC: &[u8; 8] = b"HIPADCK1";

pub fn write_checkpoint<W: Write>(mut w: W, meta: &str, store: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (_, name, entry) in store.iter() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[entry.trainable as u8])?;
        let shape = entry.tensor.shape();
        w.write_all(&(shape.len() as u64).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in entry.tensor.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_len<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    let n = read_u64(r)?;
    if n > (1 << 32) {
        return Err(Error::Load(format!("implausible {what} length {n}")));
    }
    Ok(n as usize)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(String, ParamStore)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Load("not a checkpoint (bad magic)".into()));
    }
    let meta_len = read_len(&mut r, "metadata")?;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let meta = String::from_utf8(meta).map_err(|e| Error::Load(e.to_string()))?;
    let count = read_len(&mut r, "tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nl = read_len(&mut r, "name")?;
        let mut name = vec![0u8; nl];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Load(e.to_string()))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let ndim = read_len(&mut r, "ndim")?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_len(&mut r, "dim")?);
        }
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Load(e.to_string()))?;
        store.insert(&name, t, flag[0] == 1)?;
    }
    Ok((meta, store))
}

pub fn save(path: &Path, meta: &str, store: &ParamStore) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(f, meta, store)
}

pub fn load(path: &Path) -> Result<(String, ParamStore)> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(f)
}

/// Copies tensors from `src` into `dst` by name; names and shapes must match
/// exactly.
pub fn restore_into(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Load(format!(
            "checkpoint has {} tensors, model expects {}",
            src.len(),
            dst.len()
        )));
    }
    let ids: Vec<_> = dst.iter().map(|(id, n, _)| (id, n.to_string())).collect();
    for (id, name) in ids {
        let t = src
            .by_name(&name)
            .ok_or_else(|| Error::Load(format!("missing tensor {name}")))?;
        if t.shape() != dst.get(id).shape() {
            return Err(Error::Load(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                t.shape(),
                dst.get(id).shape()
            )));
        }
        *dst.get_mut(id) = t.clone();
    }
    Ok(())
}
