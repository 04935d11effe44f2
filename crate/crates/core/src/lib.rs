//! Semantic-aware mask CycleGAN.
//!
//! Unpaired image-to-image translation between an artistic domain X and a
//! photographic domain Y. A U-Net segmenter separates subject from
//! background; during training the discriminators see only the masked
//! subject region, with masking switched on stochastically at a rate that
//! ramps up over the epochs.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod pool;
pub mod rng;
pub mod segmenter;
pub mod training;

pub use error::{Error, Result};
pub use smcyclegan_autograd as autograd;
