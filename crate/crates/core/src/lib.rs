//! Co-attention network library: tensors with reverse-mode gradients,
//! attention primitives, composable co-attention layers, output heads,
//! a deterministic trainer, synthetic tasks, and binary file formats.

pub mod attention;
pub mod accounting;
pub mod cascade;
pub mod data;
pub mod error;
pub mod feature;
pub mod heads;
pub mod io;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod model;
pub mod trace;
pub mod train;
pub mod units;

pub use error::{Error, Result};
pub use feature::{FeatureSet, FeatureVar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
