//! Minimal reverse-mode automatic differentiation over 4-D `f64` tensors,
//! with the convolution family needed for image-like networks and support
//! for differentiating through gradients (gradient-penalty objectives).

pub mod conv;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use conv::ConvSpec;
pub use optim::Adam;
pub use tape::{Tape, Var};
pub use tensor::{numel, Shape, Tensor, SCALAR};
