//! Conditional image-to-image translator: a U-Net generator with a
//! patch discriminator learns to complete full-body normal and
//! displacement atlases (plus shape coefficients) from a partial texture.
//! Everything runs on the CPU in plain `f32` with hand-written
//! forward/backward passes so training is deterministic and
//! finite-difference checkable.

pub mod layers;
pub mod loss;
pub mod optim;
pub mod ssim;
pub mod tensor;
pub mod unet;

use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("bad configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Core(#[from] uvshape_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
