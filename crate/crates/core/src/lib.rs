pub mod baseline;
pub mod config;
pub mod checkpoint;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod feature_aug;
pub mod memory;
pub mod model;
pub mod nn;
pub mod pseudo_label;
pub mod rng;
pub mod trainer;

pub use error::{ClafError, Result};
