//! Evidential multi-attribute recognition: multimodal fusion, region-aware
//! evidence reasoning, Beta evidence heads, uncertainty-paced curriculum
//! training, a synthetic task generator and evaluation metrics.

pub mod config;
pub mod curriculum;
pub mod error;
pub mod eval;
pub mod evidential;
pub mod features;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod raer;
pub mod schema;
pub mod seed;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
