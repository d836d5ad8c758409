//! Online training of neural surrogate models from an ensemble of streaming
//! solver instances.

pub mod artifacts;
pub mod buffer;
pub mod client_api;
pub mod harness;
pub mod launcher;
pub mod sampler;
pub mod server;
pub mod solvers;
pub mod stats;
pub mod trainer;
pub mod wire;
