//! Small deterministic differentiable core: tensors, convolutions, group
//! normalization, activations and SGD. Backward passes are hand-derived per
//! layer and composed by the caller.

pub mod act;
pub mod checkpoint;
pub mod conv;
pub mod norm;
pub mod optim;
pub mod tensor;

pub use act::{relu_backward, relu_forward, sigmoid_backward, sigmoid_forward};
pub use checkpoint::Checkpoint;
pub use conv::{conv2d_backward, conv2d_forward, Conv2d};
pub use norm::{GroupNorm, GroupNormCache};
pub use optim::{Sgd, SgdConfig};
pub use tensor::Tensor;
