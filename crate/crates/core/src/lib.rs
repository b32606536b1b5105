pub mod autograd;
pub mod config;
pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod losses;
pub mod mask;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod rng;
pub mod signal;
pub mod store;
pub mod synth;
pub mod tcm;
pub mod train;

pub use error::{Error, Result};
