//! Dense matrix arithmetic, a splittable RNG, and a minimal reverse-mode
//! differentiation tape. Everything downstream (constraint gradients, MLP
//! training, CNF log-densities) is built on these three pieces.

mod matrix;
mod rng;
mod tape;

pub use matrix::Matrix;
pub use rng::SplitRng;
pub use tape::{Activation, NodeId, Tape};
