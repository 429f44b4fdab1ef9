//! Versioned single-file checkpoints: little-endian float32 tensors behind
//! an `EGCK` header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use candle_core::{DType, Tensor};

use super::formats::{malformed, open, read_f32s, read_header};
use crate::nn::ParamStore;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_tensor(name: &str, t: &Tensor) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            shape: t.dims().to_vec(),
            data: t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?,
        })
    }
}

/// Adam moments keyed like the parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<NamedTensor>,
    pub v: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    /// Resolved run config as TOML.
    pub config: String,
    pub step: u64,
    pub params: Vec<NamedTensor>,
    pub optimizer: OptimizerState,
}

pub fn params_to_tensors(ps: &ParamStore) -> Result<Vec<NamedTensor>> {
    ps.iter().map(|(name, var)| NamedTensor::from_tensor(name, var.as_tensor())).collect()
}

/// Overwrite every parameter of `ps` from `params`; names and shapes must match exactly.
pub fn restore_params(ps: &ParamStore, params: &[NamedTensor]) -> Result<()> {
    if params.len() != ps.len() {
        return Err(Error::param(format!("checkpoint has {} parameters, model has {}", params.len(), ps.len())));
    }
    for p in params {
        let t = Tensor::from_vec(p.data.clone(), p.shape.as_slice(), ps.device())?;
        ps.set(&p.name, &t)?;
    }
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read, path: &Path) -> Result<String> {
    let n = r.read_u32::<LittleEndian>().map_err(|_| malformed(path, "truncated string"))? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| malformed(path, "truncated string"))?;
    String::from_utf8(buf).map_err(|_| malformed(path, "invalid utf-8"))
}

fn write_tensors(w: &mut impl Write, ts: &[NamedTensor]) -> Result<()> {
    w.write_u32::<LittleEndian>(ts.len() as u32)?;
    for t in ts {
        write_str(w, &t.name)?;
        w.write_u32::<LittleEndian>(t.shape.len() as u32)?;
        for &d in &t.shape {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in &t.data {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn read_tensors(r: &mut impl Read, path: &Path) -> Result<Vec<NamedTensor>> {
    let u32_ = |r: &mut dyn Read| r.read_u32::<LittleEndian>().map_err(|_| malformed(path, "truncated tensor table"));
    let n = u32_(r)? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let name = read_str(r, path)?;
        let rank = u32_(r)? as usize;
        let shape = (0..rank).map(|_| u32_(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data = read_f32s(r, shape.iter().product(), path)?;
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        write_str(&mut w, &ck.config_hash)?;
        write_str(&mut w, &ck.config)?;
        w.write_u64::<LittleEndian>(ck.step)?;
        write_tensors(&mut w, &ck.params)?;
        w.write_u64::<LittleEndian>(ck.optimizer.step)?;
        write_tensors(&mut w, &ck.optimizer.m)?;
        write_tensors(&mut w, &ck.optimizer.v)?;
        w.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

/// Load a checkpoint; with `expected_hash` set, a different architecture
/// hash is an error.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<Checkpoint> {
    let mut r = BufReader::new(open(path)?);
    read_header(&mut r, path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let config_hash = read_str(&mut r, path)?;
    if let Some(expected) = expected_hash {
        if expected != config_hash {
            return Err(Error::ConfigHashMismatch { expected: expected.to_string(), found: config_hash });
        }
    }
    let config = read_str(&mut r, path)?;
    let step = r.read_u64::<LittleEndian>().map_err(|_| malformed(path, "truncated step"))?;
    let params = read_tensors(&mut r, path)?;
    let opt_step = r.read_u64::<LittleEndian>().map_err(|_| malformed(path, "truncated optimizer state"))?;
    let m = read_tensors(&mut r, path)?;
    let v = read_tensors(&mut r, path)?;
    Ok(Checkpoint { config_hash, config, step, params, optimizer: OptimizerState { step: opt_step, m, v } })
}
