//! Dense reverse-mode automatic differentiation.
//!
//! A [`Tape`] records operations as they are evaluated; [`Tape::backward`]
//! walks the record in reverse and accumulates gradients into every
//! [`Var`] created with `requires_grad`. Only the primitives the keyphrase
//! model needs are provided, and broadcasting is limited to adding a bias
//! vector over the leading axis.

mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;
