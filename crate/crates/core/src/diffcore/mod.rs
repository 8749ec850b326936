//! Deterministic differentiable compute: tensors, a reverse-mode tape,
//! Adam, and a finite-difference gradient oracle.

mod adam;
mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{finite_diff_check, RELATIVE_FLOOR};
pub use graph::{forward_backward, Graph, NodeId};
pub use ops::{group_norm, l2_normalize, logsumexp, softmax, L2_EPS, NORM_EPS};
pub use tensor::{ParamSet, Real, Tensor};
