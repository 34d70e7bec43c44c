pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod consensus;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod model;
pub mod moe_core;
pub mod params;
pub mod rng;
pub mod metrics;
pub mod semantic_integration;
pub mod synthetic;
pub mod training;
pub mod token_filter;
pub mod vocab_store;

pub use error::{Error, Result};
