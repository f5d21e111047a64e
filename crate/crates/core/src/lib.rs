//! Control LLM at desk scale.
//!
//! A small pre-norm decoder-only transformer is trained on a synthetic task and
//! then extended with trainable copies of selected blocks. The copies run in
//! parallel with the frozen originals (concat) or above them (stack), and their
//! hidden states are fused by an interpolator, optionally regularised by a
//! divergence loss between the two branches.

pub mod checkpoint;
pub mod error;
pub mod expansion;
pub mod experiment;
pub mod interpolators;
pub mod probe;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::{Graph, NodeId, Real, Tensor};
