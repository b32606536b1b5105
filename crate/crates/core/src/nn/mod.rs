//! Neural-network building blocks on top of the autodiff tape.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod ssm;
pub mod transformer;

pub use layers::{BatchNorm, Ctx, LayerNorm, Linear, LoraAdapter, LoraConfig, ProjectionHead};
pub use optim::{AdamW, AdamWConfig};
pub use params::{read_checkpoint, write_checkpoint, ParamId, ParamStore};
pub use ssm::{SelectiveSsm, SsmConfig};
pub use transformer::{Transformer, TransformerAdapters, TransformerConfig};
