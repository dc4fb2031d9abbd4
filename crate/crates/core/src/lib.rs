//! Promptable region tokenization at desk scale: segmentation masks, concept
//! predictions distilled from a frozen teacher, and region captions, all
//! driven by one semantic token per region.

pub mod captioner;
pub mod datastore;
pub mod error;
pub mod evaluator;
pub mod inference;
pub mod losses;
pub mod network;
pub mod nn;
pub mod raster;
pub mod sampler;
pub mod teacher;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use candle_core;
