//! Squeeze-and-attention segmentation networks on a small CPU tensor engine.
// Negated float comparisons are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod analysis;
pub mod backbone;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod ops;
pub mod params;
pub mod sanet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use ops::Mode;
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Shape4, Tensor4};
