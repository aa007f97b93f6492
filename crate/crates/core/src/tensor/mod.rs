//! Dense tensors and a reverse-mode tape.

mod array;
mod gradcheck;
mod tape;

pub use array::Tensor;
pub use gradcheck::{gradient_check, gradient_check_many, relative_error, GradCheckReport};
pub use tape::{Activation, BinaryKind, Gradients, PadSide, Reduction, Tape, Var};

#[cfg(test)]
mod tests;
