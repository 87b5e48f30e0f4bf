//! Minimal neural-network toolkit: convolution kernels, parameter storage,
//! executors (eager, tape, MAC counting) and reusable layers.

pub mod exec;
pub mod kernels;
pub mod layers;
pub mod params;
pub mod tape;

pub use exec::{Eager, Exec, MacCounter};
pub use layers::{Conv2d, ConvTranspose2d, Rdb};
pub use params::{ParamBuilder, ParamId, ParamStore, StoreId, WeightInit};
pub use tape::{Gradients, NodeId, Tape};

/// Leaky-ReLU slope used by every network in the crate.
pub const LEAKY_SLOPE: f64 = 0.1;
