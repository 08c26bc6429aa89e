//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `AFCN`, u32 format version, u64 model-config
//! hash, u32 tensor count, then per tensor: u32 name length + UTF-8 name,
//! u32 ndim, ndim×u64 dims, and the f64 payload. Loading verifies the hash
//! against the current config so a checkpoint can never be read into a model
//! with different shapes or semantics.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{init_model, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AFCN";
pub const VERSION: u32 = 1;

pub fn save(
    path: &Path,
    params: &ModelParams,
    cfg: &TrainConfig,
    n_roi: usize,
    n_classes: usize,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&cfg.model_hash(n_roi, n_classes).to_le_bytes());
    let names = params.names();
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in names.iter().zip(tensors) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Data("truncated checkpoint".to_string()))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4>(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<8>(r)?))
}

/// Load a checkpoint into a freshly initialized model for `cfg`. Tensors
/// match by name; every stored tensor must exist with identical shape, and
/// every model parameter must be present in the file.
pub fn load(path: &Path, cfg: &TrainConfig, n_roi: usize, n_classes: usize) -> Result<ModelParams> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let mut r = std::io::BufReader::new(file);

    let magic = read_exact::<4>(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let stored_hash = read_u64(&mut r)?;
    let want_hash = cfg.model_hash(n_roi, n_classes);
    if stored_hash != want_hash {
        return Err(Error::Config(format!(
            "checkpoint model hash {stored_hash:016x} does not match current config {want_hash:016x}"
        )));
    }

    let count = read_u32(&mut r)? as usize;
    let mut stored: std::collections::BTreeMap<String, Tensor> = std::collections::BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)
            .map_err(|_| Error::Data("truncated checkpoint".to_string()))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Data("non-UTF-8 tensor name in checkpoint".to_string()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_exact::<8>(&mut r)?));
        }
        stored.insert(name, Tensor::new(shape, data)?);
    }

    let mut params = init_model(&cfg.model, n_roi, n_classes, cfg.seed)?;
    let names = params.names();
    for (name, slot) in names.iter().zip(params.tensors_mut()) {
        let t = stored
            .remove(name)
            .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor {name:?}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Data(format!(
                "checkpoint tensor {name:?} has shape {:?}, model expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    if let Some(extra) = stored.keys().next() {
        return Err(Error::Data(format!("checkpoint has unknown tensor {extra:?}")));
    }
    Ok(params)
}
