//! Constituent-attention encoders, latent tree extraction and the
//! agreement-violation experiment pipeline.

pub mod agreement;
pub mod analysis;
pub mod autodiff;
pub mod constituent;
pub mod encoder;
pub mod experiment;
pub mod grammar;
pub mod stats;
pub mod train;
pub mod tree;
pub mod error;

pub use error::{Error, Result};
