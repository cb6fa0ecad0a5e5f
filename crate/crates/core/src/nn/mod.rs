//! Minimal tensor library: reverse-mode autodiff, the operators the model
//! needs, AdamW and a finite-difference gradient checker.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_steps, GradCheck};
pub use graph::{Gradients, Graph, Mode, Var};
pub use optim::{AdamW, AdamWConfig};
pub use rng::{derive_seed, rng, Rng};
pub use tensor::{argmax, softmax_slice, Tensor};
