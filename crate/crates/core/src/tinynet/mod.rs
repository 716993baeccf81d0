//! Minimal reverse-mode autodiff and the U-Net pieces built on it.
//!
//! Tensors are `[N, C, H, W]` (2D) or `[N, C, D, H, W]` (3D). Everything is
//! generic over [`Scalar`] so the same code trains in `f32` and is checked
//! against finite differences in `f64`.

mod checkpoint;
mod kernels;
mod optim;
mod scalar;
mod tape;
mod unet;

use thiserror::Error;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, SNET_MAGIC,
    SNET_VERSION,
};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, CosineSchedule, OptimState};
pub use scalar::Scalar;
pub use tape::{Tape, Tensor, Var, BCE_CLAMP, DICE_EPS};
pub use unet::{Param, UNet, UNetConfig, KERNEL, POOL};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("bad input shape: {0}")]
    BadShape(String),
    #[error("bad model configuration: {0}")]
    BadConfig(String),
    #[error("checkpoint has bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated")]
    TruncatedCheckpoint,
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Codec(#[from] crate::si_codec::CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
