//! Dense matrices, reverse-mode differentiation, AdamW and the seeded RNG.

pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use optim::{adamw_step, AdamWConfig, AdamWState};
pub use rng::{derive_seed, Rng};
pub use tape::{softmax_in_place, Activation, Axis, Gradients, NodeId, OpKind, Tape};
pub use tensor::Tensor;
