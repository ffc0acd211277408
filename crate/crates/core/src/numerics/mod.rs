//! Tensors, linear algebra, randomness, reverse-mode differentiation and
//! optimization.

pub mod exact;
pub mod linalg;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use exact::exact_mean;
pub use linalg::{cholesky, svd, svd_right, Svd};
pub use optim::{lr_schedule, AdamWConfig, AdamWState, PlateauConfig, PlateauSchedule};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
