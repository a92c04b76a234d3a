//! H-Net: twin convolutional autoencoders joined by a latent transformer.

mod arch;
pub mod checkpoint;
mod hnet;
mod layers;

use naturalize_autodiff::TensorError;
use thiserror::Error;

use crate::format::FormatError;

pub use arch::ArchSpec;
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, HNET_MAGIC,
    HNET_VERSION,
};
pub use hnet::{BottleneckBlock, Decoder, Encoder, EncoderStage, HNetParams, Part, Transformer};
pub(crate) use layers::he_tensor;
pub use layers::{BatchNorm, Binder, Conv, Module};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
}
