//! Dense row-major CPU tensors and a define-by-run gradient tape.
//!
//! Feature maps use `(batch, channel, height, width)` order. Every op on
//! [`Var`] records itself on the owning [`Graph`]; [`Graph::backward`] returns
//! gradients for every leaf.

pub mod archive;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod real;
pub mod suite;
pub mod tensor;

pub use archive::Archive;
pub use error::{Result, TensorError};
pub use flops::{conv2d_tally, FlopCounter, FlopTally};
pub use graph::{Grads, Graph, OpTiming, ScopeGuard, Var};
pub use ops::conv::{conv_out_size, Conv2dParams};
pub use ops::elementwise::gelu;
pub use ops::norm::{NormMode, RunningStats, BN_MOMENTUM, NORM_EPS};
pub use ops::resize::{bilinear_resize_tensor, scaled_size};
pub use ops::shape::permute_tensor;
pub use ops::softmax::softmax_tensor;
pub use real::{DType, Real};
pub use tensor::Tensor;
