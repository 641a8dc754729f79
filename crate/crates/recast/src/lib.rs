//! recast: deterministic diffusion inversion and embedding-guided editing.
//!
//! The crate trains small noise-prediction models on toy data, inverts
//! inputs to latents with deterministic DDIM, fine-tunes a copy of the
//! model under a directional embedding loss, and derives the editing
//! applications: single-attribute manipulation, unseen-domain translation,
//! multi-attribute blending, and continuous transition.

pub mod autodiff;
pub mod denoiser;
pub mod error;
pub mod finetune;
pub mod guidance;
pub mod rng;
pub mod sampler;
pub mod schedule;

pub use autodiff::{Graph, Tensor};
pub use denoiser::{DenoiserConfig, DenoiserKind, NoiseModel, ParamStore};
pub use error::{Error, Result};
pub use rng::Rng;
pub use schedule::{Schedule, TimestepGrid};
