//! Operators, decoder machinery, FLOPs profiler and verification harness for
//! a lightweight two-hand mesh reconstruction network.
//!
//! Everything runs in `f64` on the CPU and is deterministic for a fixed seed.

pub mod attention;
pub mod bridge;
pub mod config;
pub mod encoder;
pub mod error;
pub mod flops;
pub mod grad;
pub mod lwat;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod param;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;
