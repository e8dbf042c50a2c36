//! Annotator-conditioned low-rank adaptation for perspectivist classification.

pub mod baselines;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod hypernet;
pub mod io;
pub mod lora;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod report;
pub mod synthgen;
pub mod system;
pub mod training;

pub use error::{Error, Result};
