//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! Just enough for small convolutional inference networks: broadcasting
//! elementwise arithmetic, 2-D convolution with zero or replicate padding,
//! channel softmax, instance normalization, reductions, and Adam.
//!
//! ```
//! use bayeseg_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::scalar(3.0f64));
//! let y = g.square(x).unwrap();
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap().item(), 6.0);
//! ```

mod element;
mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use kernels::conv::Padding;
pub use optim::{AdamConfig, AdamState};
pub use tensor::{Tensor, TENSOR_FORMAT_VERSION, TENSOR_MAGIC};
