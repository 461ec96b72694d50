//! Training-free image composition by optimizing a latent under a frozen
//! diffusion prior: object removal, copy-paste harmonization and semantic
//! composition guided by a delta denoising score.

pub mod assets;
pub mod attention;
pub mod backend;
pub mod error;
pub mod guidance;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
