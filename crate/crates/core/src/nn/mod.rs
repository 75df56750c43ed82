//! Parameter storage, layer helpers, positional encodings and the optimizer
//! shared by the reasoner, the detector and prompt training.

pub mod layers;
pub mod optim;
pub mod params;
pub mod posenc;

pub use optim::{AdamW, AdamWConfig};
pub use params::{named_rng, Bindings, Init, ParamStore};
