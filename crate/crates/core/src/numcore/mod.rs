//! Tensors, reverse-mode autodiff, seeded randomness and gradient checking.

mod gradcheck;
mod graph;
pub mod ops;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Mask, Var};
pub use ops::{conv1d, gelu, kl_divergence, kl_from_logits, layer_norm, log_softmax, matmul, softmax, PROB_FLOOR};
pub use rng::Rng;
pub use tensor::{Real, Tensor};
