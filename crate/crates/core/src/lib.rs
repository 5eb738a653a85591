//! Thermal-to-visible face translation on a latent diffusion backbone.
//!
//! Modules, bottom-up: [`tensor`] (autodiff substrate), [`nn`] (layers),
//! [`ssm`] (bidirectional state-space block, attention baseline, benchmark),
//! [`codec`] (VQ-VAE pair), [`conditioning`] (attribute classifier and
//! prompt table), [`diffusion`] (schedule, UNet, sampler, translation),
//! [`metrics`] (identity and image-quality metrics), [`synth`] (paired data)
//! and [`io`] (checkpoints, config, netpbm, CSV).

pub mod codec;
pub mod conditioning;
pub mod diffusion;
pub mod error;
pub mod gradsuite;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod ssm;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
