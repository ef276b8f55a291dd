//! Plain convolutional networks without shortcuts, built around three ideas:
//! a training-time deep form that collapses into a shallow deployment form,
//! series-informed activations that restore nonlinearity cheaply, and exact
//! structural fusion with numerical verification.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense row-major tensors over `f32`/`f64`
//! - [`ops`]: convolution, pooling, batch norm, linear, losses
//! - [`act`]: lambda-blended ReLU and the series-informed activation
//! - [`arch`]: network specification, construction, parameter/FLOP accounting
//! - [`graph`]: the runtime network (forward, backward, parameter traversal)
//! - [`fusion`]: BN folding, conv merging, equivalence verification
//! - [`train`]: optimizer, schedule, training loop, checkpoints, grad checks
//! - [`data`]: dataset formats, synthetic generators, batching, augmentation
//! - [`bench`]: latency measurement
//! - [`reference`]: naive oracle implementations backing the tests

pub mod act;
pub mod arch;
pub mod bench;
pub mod data;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod ops;
pub mod reference;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};

/// Schema tag stamped into every machine-readable artifact (manifests,
/// fusion reports, bench reports, checkpoint metadata).
pub const SCHEMA_VERSION: u32 = 1;
