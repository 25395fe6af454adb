//! Minimal neural-network building blocks on top of candle tensors.

pub mod conv;
pub mod layers;
pub mod optim;
pub mod params;

pub use layers::{BatchNorm, Conv2d, Linear, Mode, MultiHeadSelfAttention};
pub use optim::{Adam, AdamConfig, Optimizer, OptimizerState, Sgd, SgdConfig};
pub use params::{Init, ParamStore};
