//! Dense tensors, a reverse-mode gradient tape and the Adam optimizer.

mod adam;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use tape::{sigmoid, softmax_rows, Gradients, Tape, Var, L2_EPS};
pub use tensor::Tensor;
