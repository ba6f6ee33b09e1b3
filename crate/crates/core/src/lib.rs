//! Gated bimodal Transformer encoders over dense `f64` matrices, with
//! hand-written reverse-mode gradients, toy vision-language pretraining and
//! the significance tests used to compare trained models.

pub mod analysis;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod embed;
pub mod equivalence;
pub mod error;
pub mod gated;
pub mod gradcheck;
pub mod graph;
pub mod mat;
pub mod model;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod synth;
pub mod train;
pub mod vfr;

pub use error::{Error, Result};
pub use mat::Mat;
