//! Minimal dense-tensor core with tape-based reverse-mode autodiff.
//!
//! The op set is fixed and small: matmul (plain and batched), broadcasting
//! add/mul, elementwise activations, softmax, layer norm, depthwise 1-D
//! convolution, concat/reshape/permute, dropout and BCE-with-logits. That is
//! enough for convolutional stems, Transformer encoders and attention
//! pooling. Everything runs on `f64`.

pub mod checkpoint;
pub mod error;
mod gemm;
pub mod init;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::{Checkpoint, NamedTensor};
pub use error::{Error, Result};
pub use init::Init;
pub use optim::Adam;
pub use tape::{bce_term, sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;
