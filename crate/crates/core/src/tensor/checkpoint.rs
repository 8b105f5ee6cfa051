//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PSPH" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: utf-8 | dtype: u8 (0 = f32, 1 = f64)
//!   rank: u32 | dims: rank x u64 | data: prod(dims) x element
//! ```

use std::io::{Read, Write};

use super::{Adam, DType, Module, Storage};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PSPH";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Storage,
}

pub fn write_checkpoint<W: Write>(mut w: W, records: &[CheckpointRecord]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for r in records {
        let name = r.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[r.data.dtype().tag()])?;
        w.write_all(&(r.dims.len() as u32).to_le_bytes())?;
        for &d in &r.dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match &r.data {
            Storage::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            Storage::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 if filled == 0 => return Ok(false),
            0 => return Err(Error::Checkpoint("truncated record".into())),
            n => filled += n,
        }
    }
    Ok(true)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated record".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<CheckpointRecord>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("file too short for header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut records = Vec::new();
    loop {
        let mut len = [0u8; 4];
        if !read_exact_or_eof(&mut r, &mut len)? {
            break;
        }
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut name).map_err(|_| Error::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not utf-8".into()))?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(|_| Error::Checkpoint("truncated dtype".into()))?;
        let dtype = DType::from_tag(tag[0]).ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {}", tag[0])))?;
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated dims".into()))?;
            dims.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = dims.iter().product();
        let data = match dtype {
            DType::F32 => {
                let mut raw = vec![0u8; n * 4];
                r.read_exact(&mut raw).map_err(|_| Error::Checkpoint(format!("truncated data for {name}")))?;
                Storage::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            DType::F64 => {
                let mut raw = vec![0u8; n * 8];
                r.read_exact(&mut raw).map_err(|_| Error::Checkpoint(format!("truncated data for {name}")))?;
                Storage::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
            }
        };
        records.push(CheckpointRecord { name, dims, data });
    }
    Ok(records)
}

/// Parameter records of a module, in visiting order.
pub fn module_records(module: &dyn Module) -> Vec<CheckpointRecord> {
    let mut out = Vec::new();
    module.visit(&mut |p| {
        out.push(CheckpointRecord {
            name: p.name().to_string(),
            dims: p.shape().to_vec(),
            data: p.tensor().storage().clone(),
        })
    });
    out
}

/// Adam moments and step count, named `adam.m.<param>`, `adam.v.<param>`, `adam.step`.
pub fn optimizer_records(adam: &Adam, modules: &[&dyn Module]) -> Vec<CheckpointRecord> {
    let mut out = Vec::new();
    for m in modules {
        m.visit(&mut |p| {
            let (mm, vv) = p.moments();
            out.push(CheckpointRecord { name: format!("adam.m.{}", p.name()), dims: p.shape().to_vec(), data: mm.clone() });
            out.push(CheckpointRecord { name: format!("adam.v.{}", p.name()), dims: p.shape().to_vec(), data: vv.clone() });
        });
    }
    out.push(CheckpointRecord { name: "adam.step".into(), dims: vec![], data: Storage::F64(vec![adam.steps_taken() as f64]) });
    out
}

/// Loads every parameter of `module` from `records`; missing or misshapen
/// entries are checkpoint errors. Records for other modules are ignored.
pub fn load_module(module: &mut dyn Module, records: &[CheckpointRecord]) -> Result<()> {
    let mut result = Ok(());
    module.visit_mut(&mut |p| {
        if result.is_err() {
            return;
        }
        result = match records.iter().find(|r| r.name == p.name()) {
            None => Err(Error::Checkpoint(format!("missing parameter {}", p.name()))),
            Some(r) if r.dims != p.shape() => Err(Error::Checkpoint(format!(
                "parameter {}: checkpoint shape {:?}, model shape {:?}",
                p.name(),
                r.dims,
                p.shape()
            ))),
            Some(r) => p.set_data(r.data.clone()),
        };
    });
    result
}

/// Restores optimizer state written by [`optimizer_records`], when present.
pub fn load_optimizer(adam: &mut Adam, modules: &mut [&mut dyn Module], records: &[CheckpointRecord]) -> Result<()> {
    let Some(step) = records.iter().find(|r| r.name == "adam.step") else { return Ok(()) };
    adam.set_steps_taken(step.data.get_f64(0) as u64);
    let mut result = Ok(());
    for m in modules.iter_mut() {
        m.visit_mut(&mut |p| {
            if result.is_err() {
                return;
            }
            let find = |prefix: &str| records.iter().find(|r| r.name == format!("{prefix}{}", p.name())).map(|r| r.data.clone());
            if let (Some(mm), Some(vv)) = (find("adam.m."), find("adam.v.")) {
                result = p.set_moments(mm, vv);
            }
        });
    }
    result
}
