//! Latent-category-guided inpainting diffusion at desk scale.
//!
//! The crate is self-contained: a small tensor type with tape-based
//! reverse-mode differentiation, gated linear attention, the interaction
//! block that mixes it with cross-attention over category embeddings, an
//! exactly invertible space-to-depth latent codec, the diffusion engine,
//! procedural data generation, and the file formats used by the CLI.

pub mod autodiff;
pub mod binio;
pub mod checkpoint;
pub mod checks;
pub mod codec;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod gla;
pub mod gradcheck;
pub mod image;
pub mod interaction;
pub mod lcg;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod seeds;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
