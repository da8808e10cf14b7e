//! The batch-normalized U-Net: stride-2 convolutional downsampling, x2
//! bilinear upsampling, skip connections, and a swappable output head
//! (3-channel reconstruction or 1-channel sigmoid segmentation).

mod checkpoint;
mod unet;

pub use checkpoint::{transfer_weights, Checkpoint, NamedTensor, Phase, Provenance, TransferStats};
pub use unet::{build_unet, FinalActivation, UNet, UNetConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network config: {reason}")]
    InvalidConfig { reason: String },
    #[error("input size {height}x{width} not divisible by {divisor} (network depth {depth})")]
    IndivisibleSize {
        height: usize,
        width: usize,
        divisor: usize,
        depth: usize,
    },
    #[error("architecture mismatch: {reason}")]
    ArchitectureMismatch { reason: String },
    #[error("checkpoint io error at {path}: {source}")]
    CheckpointIo {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {reason}")]
    MalformedCheckpoint { reason: String },
}
