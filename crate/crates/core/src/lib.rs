//! Task-vector merging with consistency masks, cross-attention-only action
//! experts with per-task heads, and training-free subspace task routing,
//! plus a synthetic multi-task harness that exercises the whole stack.

pub mod checkpoint;
pub mod error;
pub mod expert;
pub mod mask;
pub mod merge;
pub mod router;
pub(crate) mod nn;
pub mod task_vector;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use tensor::{NamedTensorMap, Tensor};
