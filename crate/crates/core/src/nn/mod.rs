//! A from-scratch engine for the three-layer super-resolution network:
//! valid convolutions, cached forward pass, analytic backward pass, squared
//! error loss and Adam.

mod adam;
mod checkpoint;
mod conv;
mod network;
mod tensor;

pub use adam::{adam_step, AdamState, DEFAULT_LEARNING_RATES};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use conv::{conv2d_valid, ConvLayer};
pub use network::{
    backward, forward, forward_cached, init_params, mse_loss, Architecture, ForwardCache, Gradients, LayerGrad,
    SrcnnParams, INIT_STD,
};
pub use tensor::Tensor3;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("forward cache was computed with different parameters")]
    StaleCache,
    #[error("bad magic {:?}, expected \"SRC1\"", String::from_utf8_lossy(.found))]
    BadMagic { found: [u8; 4] },
    #[error("truncated checkpoint: need {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after checkpoint payload")]
    TrailingBytes(usize),
    #[error("non-finite parameter in checkpoint")]
    NonFinite,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, NnError>;
