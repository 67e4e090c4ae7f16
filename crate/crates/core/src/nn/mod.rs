//! Minimal hand-rolled neural-network toolkit: flat tensors, named
//! parameters, explicit layer forward/backward, optimizers and a
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod store;
pub mod tensor;

pub use gradcheck::{compare_grads, finite_diff_grads, grads_by_name, GradCheckReport};
pub use layers::Conv2d;
pub use optim::{lr_at_epoch, AdamW, Sgd};
pub use store::{ParamId, ParamStore};
pub use tensor::Tensor3;
