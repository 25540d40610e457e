//! Dense tensors and a small reverse-mode differentiation engine.
//!
//! Just enough machinery to train and inspect compact convolutional
//! networks on 2D images and 3D volumes on a CPU: same-padded convolutions
//! (shared or per-sample kernels), pooling, nearest up-sampling, batch
//! normalization, rectifiers, affine layers and an Adam optimizer. Everything
//! is generic over `f32` and `f64` so gradients can be verified against
//! finite differences in double precision.

mod error;
pub mod gradcheck;
mod graph;
mod ops;
mod optim;
mod param;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Backward, BackwardCtx, BackwardMode, Grads, Graph, Var};
pub use ops::{sigmoid, BatchStats};
pub use optim::Adam;
pub use param::{Bound, Param, ParamId, ParamKind, ParamStore};
pub use real::Real;
pub use tensor::{numel, Tensor};
