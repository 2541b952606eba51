//! Dense numeric core: tensors, loop kernels, a reverse-mode tape, and AdamW.

pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use kernels::{argmax, log_softmax_row, softmax, softmax_row, AttnMask};
pub use optim::{clip_grad_norm, AdamW};
pub use params::{Grads, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
