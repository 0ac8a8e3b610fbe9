//! Numeric substrate: matrices, seeded sampling, reverse-mode autodiff, SVD.

mod gradcheck;
mod matrix;
mod rng;
mod scalar;
mod svd;
mod tape;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use matrix::Matrix;
pub use rng::{sample_normal, sample_uniform, RngPosition, RngState};
pub use scalar::{lit, DType, Scalar};
pub use svd::{numerical_rank, singular_values, SVD_MAX_ITERATIONS};
pub use tape::{Gradients, Tape, Var};


/// Standard deviation over all elements of `m`; see [`Matrix::std_all`].
pub fn std_all<T: Scalar>(m: &Matrix<T>) -> crate::Result<T> {
    m.std_all()
}

/// Product `a · b`; see [`Matrix::matmul`].
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> crate::Result<Matrix<T>> {
    a.matmul(b)
}
