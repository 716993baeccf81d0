//! On-disk formats: SVOL volumes, JSON dataset manifests and PGM export.
//!
//! SVOL layout (all little-endian):
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `SVOL`                  |
//! | 4      | 4    | version (u32, = 1)            |
//! | 8      | 16   | H, W, D, C (u32 each)         |
//! | 24     | 12   | spacing h, w, d (f32 each)    |
//! | 36     | 4·N  | samples (f32), `(c, d, h, w)` |

use std::collections::HashSet;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::si_codec::{CodecError, SuperImage, Volume};

pub const SVOL_MAGIC: [u8; 4] = *b"SVOL";
pub const SVOL_VERSION: u32 = 1;
pub const SVOL_HEADER_LEN: usize = 36;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("file truncated: expected {expected} bytes, found {actual}")]
    TruncatedFile { expected: u64, actual: u64 },
    #[error("file has {extra} trailing bytes after the payload")]
    TrailingData { extra: u64 },
    #[error("declared dims {0:?} overflow")]
    DimOverflow([u32; 4]),
    #[error("dimension {0} does not fit in the header")]
    DimTooLarge(usize),
    #[error("channel {channel} out of range for {channels} channels")]
    BadChannel { channel: usize, channels: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Volume(#[from] CodecError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Serializes a volume into the SVOL byte layout.
pub fn encode_volume(v: &Volume) -> Result<Vec<u8>, StoreError> {
    let (h, w, d, c) = v.dims();
    let mut out = Vec::with_capacity(SVOL_HEADER_LEN + 4 * v.data().len());
    out.extend_from_slice(&SVOL_MAGIC);
    out.extend_from_slice(&SVOL_VERSION.to_le_bytes());
    for n in [h, w, d, c] {
        let n = u32::try_from(n).map_err(|_| StoreError::DimTooLarge(n))?;
        out.extend_from_slice(&n.to_le_bytes());
    }
    for s in v.spacing() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn f32_at(bytes: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parses SVOL bytes, validating magic, version and the payload length.
pub fn decode_volume(bytes: &[u8]) -> Result<Volume, StoreError> {
    if bytes.len() < SVOL_HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != SVOL_MAGIC {
            return Err(StoreError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(StoreError::TruncatedFile {
            expected: SVOL_HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != SVOL_MAGIC {
        return Err(StoreError::BadMagic(magic));
    }
    let version = u32_at(bytes, 4);
    if version != SVOL_VERSION {
        return Err(StoreError::BadVersion(version));
    }
    let dims = [
        u32_at(bytes, 8),
        u32_at(bytes, 12),
        u32_at(bytes, 16),
        u32_at(bytes, 20),
    ];
    let count = dims
        .iter()
        .try_fold(1u64, |acc, &n| acc.checked_mul(n as u64))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(SVOL_HEADER_LEN as u64))
        .ok_or(StoreError::DimOverflow(dims))?;
    let actual = bytes.len() as u64;
    if actual < count {
        return Err(StoreError::TruncatedFile {
            expected: count,
            actual,
        });
    }
    if actual > count {
        return Err(StoreError::TrailingData {
            extra: actual - count,
        });
    }
    let spacing = [f32_at(bytes, 24), f32_at(bytes, 28), f32_at(bytes, 32)];
    let data: Vec<f32> = bytes[SVOL_HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let [h, w, d, c] = dims.map(|n| n as usize);
    Ok(Volume::new(h, w, d, c, spacing, data)?)
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<(), StoreError> {
    fs::write(path, encode_volume(v)?)?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume, StoreError> {
    decode_volume(&fs::read(path)?)
}

/// One case of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

/// Dataset manifest, serialized as a JSON array of [`ManifestRecord`].
///
/// Relative paths are resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    fn check_unique(&self) -> Result<(), StoreError> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(StoreError::Manifest(format!("duplicate id {:?}", r.id)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        self.check_unique()?;
        let mut f = BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    /// Loads a manifest, resolving its paths and checking that every file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            StoreError::Manifest(format!("cannot read {}: {e}", path.display()))
        })?;
        let mut manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| StoreError::Manifest(format!("{}: {e}", path.display())))?;
        manifest.check_unique()?;
        let base = path.parent().unwrap_or(Path::new("."));
        for r in &mut manifest.records {
            for p in [&mut r.image_path, &mut r.mask_path] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
                if !p.is_file() {
                    return Err(StoreError::Manifest(format!(
                        "case {:?}: missing file {}",
                        r.id,
                        p.display()
                    )));
                }
            }
        }
        Ok(manifest)
    }

    /// Reads every `(image, mask)` pair in order.
    pub fn read_cases(&self) -> Result<Vec<(String, Volume, Volume)>, StoreError> {
        self.records
            .iter()
            .map(|r| {
                Ok((
                    r.id.clone(),
                    read_volume(&r.image_path)?,
                    read_volume(&r.mask_path)?,
                ))
            })
            .collect()
    }
}

/// Renders one channel as an 8-bit binary PGM, min-max scaled to `[0, 255]`.
/// A constant channel renders as all zeros.
pub fn encode_pgm(si: &SuperImage, channel: usize) -> Result<Vec<u8>, StoreError> {
    if channel >= si.channels() {
        return Err(StoreError::BadChannel {
            channel,
            channels: si.channels(),
        });
    }
    let plane = si.channel(channel);
    let (lo, hi) = plane
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let mut out = format!("P5\n{} {}\n255\n", si.width(), si.height()).into_bytes();
    out.extend(plane.iter().map(|&v| {
        if range > 0.0 {
            (255.0 * (v - lo) / range).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn export_pgm(si: &SuperImage, channel: usize, path: impl AsRef<Path>) -> Result<(), StoreError> {
    fs::write(path, encode_pgm(si, channel)?)?;
    Ok(())
}
