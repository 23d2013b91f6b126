//! Dense tensors, vector primitives, reverse-mode differentiation and the
//! weight checkpoint format.

pub mod checkpoint;
mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckReport, FD_SAMPLE, FD_STEP};
pub use ops::{layer_norm, logsumexp, relu_sq, softmax, softmax_in_place, LN_EPS};
pub use tape::{cv2_value, Gradients, Tape, Var};
pub use tensor::{matmul, matmul_seq, vec_mat_cols_into, vec_mat_into, Tensor2};
