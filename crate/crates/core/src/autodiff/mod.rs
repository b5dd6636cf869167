//! Minimal reverse-mode autodiff used by the network layers.

pub mod conv;
pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use conv::Padding;
pub use gradcheck::{directional_check, grad_check, grad_check_entries};
pub use optim::{Adam, AdamConfig};
pub use tape::{BatchStats, ChannelLayout, Gradients, LinearMap, Tape, Var};
pub use tensor::Tensor;
