//! Binary checkpoint container.
//!
//! Layout, all integers u32 little-endian:
//!
//! ```text
//! "DMDL" | version | precision (0 = f64, 1 = f32)
//! data_dim | out_dim | label_count | n_freqs | time_dim | cond_dim
//! n_hidden | hidden[0..n_hidden]
//! n_slots  | for each slot: ndim | dims[0..ndim]
//! freqs[0..n_freqs] | slot data in declaration order
//! ```
//!
//! Scalars are written at the precision named in the header. A checkpoint of
//! either precision can be read back; values are converted to the active
//! scalar type.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{NetConfig, NetParams};
use crate::tensor::{Real, Tensor, PRECISION_FLAG};

pub const MAGIC: &[u8; 4] = b"DMDL";
pub const VERSION: u32 = 1;

pub fn write_params(w: &mut impl Write, params: &NetParams) -> Result<()> {
    let cfg = params.config();
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, PRECISION_FLAG)?;
    for v in [cfg.data_dim, cfg.out_dim, cfg.label_count, cfg.n_freqs, cfg.time_dim, cfg.cond_dim] {
        put_u32(w, v as u32)?;
    }
    put_u32(w, cfg.hidden.len() as u32)?;
    for &h in &cfg.hidden {
        put_u32(w, h as u32)?;
    }
    put_u32(w, params.slots().len() as u32)?;
    for s in params.slots() {
        put_u32(w, s.shape().len() as u32)?;
        for &d in s.shape() {
            put_u32(w, d as u32)?;
        }
    }
    for &f in params.freqs() {
        w.write_all(&f.to_le_bytes())?;
    }
    for s in params.slots() {
        for &v in s.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_params(r: &mut impl Read) -> Result<NetParams> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let precision = get_u32(r)?;
    if precision > 1 {
        return Err(Error::Checkpoint(format!("unknown precision flag {precision}")));
    }
    let mut head = [0usize; 6];
    for h in &mut head {
        *h = get_u32(r)? as usize;
    }
    let n_hidden = get_u32(r)? as usize;
    let hidden = (0..n_hidden).map(|_| get_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let config = NetConfig {
        data_dim: head[0],
        out_dim: head[1],
        label_count: head[2],
        n_freqs: head[3],
        time_dim: head[4],
        cond_dim: head[5],
        hidden,
    };
    let n_slots = get_u32(r)? as usize;
    let expected = config.slot_shapes();
    if n_slots != expected.len() {
        return Err(Error::Checkpoint(format!(
            "slot table has {n_slots} entries, config implies {}",
            expected.len()
        )));
    }
    let mut shapes = Vec::with_capacity(n_slots);
    for want in &expected {
        let ndim = get_u32(r)? as usize;
        let dims = (0..ndim).map(|_| get_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        if &dims != want {
            return Err(Error::Checkpoint(format!("slot shape {dims:?}, expected {want:?}")));
        }
        shapes.push(dims);
    }
    let freqs = (0..config.n_freqs).map(|_| get_real(r, precision)).collect::<Result<Vec<_>>>()?;
    let mut slots = Vec::with_capacity(n_slots);
    for shape in shapes {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| get_real(r, precision)).collect::<Result<Vec<_>>>()?;
        slots.push(Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?);
    }
    NetParams::from_slots(config, freqs, slots)
}

pub fn save(path: impl AsRef<Path>, params: &NetParams) -> Result<()> {
    let mut buf = Vec::new();
    write_params(&mut buf, params)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<NetParams> {
    let bytes = std::fs::read(path)?;
    read_params(&mut bytes.as_slice())
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_real(r: &mut impl Read, precision: u32) -> Result<Real> {
    if precision == 0 {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b) as Real)
    } else {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(f32::from_le_bytes(b) as Real)
    }
}
