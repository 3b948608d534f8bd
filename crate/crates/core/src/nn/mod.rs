//! Minimal differentiable tensor machinery: dense tensors, convolution kernels,
//! a per-sample autodiff tape, parameter storage and AdamW.

pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
mod tensor;

pub use graph::{Grads, Graph, Var};
pub use optim::{cosine_lr, AdamW, GroupRates};
pub use params::{Param, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;
