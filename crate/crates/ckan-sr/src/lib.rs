//! Convolution as per-patch function application: images are unfolded into
//! patch vectors, each patch is mapped by a small spline-augmented network,
//! and the outputs are reassembled on the spatial grid. The same operator in
//! its linear mode reproduces ordinary convolution exactly, which anchors the
//! test suite. On top of the operator sits a compact 4x super-resolution
//! pipeline: synthetic data, generator/discriminator models, two-stage
//! training, and reference-grade image metrics.

pub mod ckan;
pub mod counters;
pub mod data;
pub mod kan;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod bench;
pub mod selftest;
pub mod spline;
pub mod tensor;
pub mod train;

pub use tensor::{no_grad, Tensor, TensorError, TensorResult};
