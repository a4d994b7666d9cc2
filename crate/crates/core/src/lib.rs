pub mod checkpoint;
pub mod container;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod image;
pub mod inference;
pub mod lora;
pub mod model;
pub mod nn;
pub mod optim;
pub mod real;
pub mod sampler;
pub mod schedule;
pub mod service;
pub mod slider;
pub mod vocab;

pub use error::{Error, Result};
