//! Multi-branch fully convolutional network with a semantic head and a depth-bin head
//! on every branch.

pub mod config;
pub mod layers;
pub mod model;
pub mod params;

pub use config::{
    Aggregation, BranchInput, BranchSpec, LayerKind, LayerRole, LayerSpec, NetworkConfig, ParamShape,
};
pub use model::{backward, forward, Forward, ForwardCache};
pub use params::{LayerParams, NetworkParams};
