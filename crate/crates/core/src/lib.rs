//! Learned enhancement of phone photos toward DSLR quality.
//!
//! The crate covers the full pipeline: aligning phone/DSLR captures into
//! patch pairs, the generator/discriminator/VGG networks with hand-written
//! gradients, the composite perceptual loss, adversarial training with
//! checkpointing, and PSNR/SSIM evaluation.

pub mod align;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod exec;
pub mod imageio;
pub mod losses;
pub mod nets;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
