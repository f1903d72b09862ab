//! Dense tensors, the differentiation tape, and the finite-difference oracle.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, Coordinates, GradCheckReport};
pub use tape::{
    gelu, gelu_grad, gumbel_keep, nll, sigmoid, BinaryOp, CustomBackward, Gradients, Tape, UnaryOp, Var,
    GATHER_ZERO, GUMBEL_P_MAX, GUMBEL_P_MIN, LOG_FLOOR, NLL_CLAMP,
};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
