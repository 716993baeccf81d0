//! SNET model checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "SNET" | version u32 (=1)
//! dims u32 | in_channels u32 | out_channels u32 | levels u32 | base_width u32
//! n_params u32
//! n_params × { name_len u32 | name (UTF-8) | rank u32 | rank × extent u32 }
//! payload: every parameter's f32 values, in name-table order
//! ```

use std::fs;
use std::path::Path;

use super::unet::{Param, UNet, UNetConfig};
use super::NetError;

pub const SNET_MAGIC: [u8; 4] = *b"SNET";
pub const SNET_VERSION: u32 = 1;

fn put(out: &mut Vec<u8>, v: usize) -> Result<(), NetError> {
    let v = u32::try_from(v).map_err(|_| NetError::Checkpoint(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(model: &UNet<f32>) -> Result<Vec<u8>, NetError> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(&SNET_MAGIC);
    out.extend_from_slice(&SNET_VERSION.to_le_bytes());
    for v in [
        cfg.dims,
        cfg.in_channels,
        cfg.out_channels,
        cfg.levels,
        cfg.base_width,
    ] {
        put(&mut out, v)?;
    }
    put(&mut out, model.params().len())?;
    for p in model.params() {
        put(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        put(&mut out, p.shape.len())?;
        for &e in &p.shape {
            put(&mut out, e)?;
        }
    }
    for p in model.params() {
        for v in &p.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(NetError::TruncatedCheckpoint),
        }
    }

    fn u32(&mut self) -> Result<usize, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<UNet<f32>, NetError> {
    let mut r = Reader { bytes, at: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != SNET_MAGIC {
        return Err(NetError::BadMagic(magic));
    }
    let version = r.u32()? as u32;
    if version != SNET_VERSION {
        return Err(NetError::BadVersion(version));
    }
    let config = UNetConfig {
        dims: r.u32()?,
        in_channels: r.u32()?,
        out_channels: r.u32()?,
        levels: r.u32()?,
        base_width: r.u32()?,
    };
    config.validate()?;
    let count = r.u32()?;
    if count != config.parameter_shapes().len() {
        return Err(NetError::Checkpoint(format!(
            "{count} parameters in name table, configuration needs {}",
            config.parameter_shapes().len()
        )));
    }
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| NetError::Checkpoint(e.to_string()))?
            .to_owned();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        table.push((name, shape));
    }
    let mut params = Vec::with_capacity(count);
    for (name, shape) in table {
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| NetError::Checkpoint(format!("{name}: shape overflows")))?;
        let values = r
            .take(n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.push(Param {
            name,
            shape,
            values,
        });
    }
    if r.at != bytes.len() {
        return Err(NetError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.at
        )));
    }
    UNet::from_params(config, params)
}

pub fn write_checkpoint(model: &UNet<f32>, path: impl AsRef<Path>) -> Result<(), NetError> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<UNet<f32>, NetError> {
    decode_checkpoint(&fs::read(path)?)
}
