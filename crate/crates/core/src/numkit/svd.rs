//! Singular values, backed by nalgebra's bidiagonal SVD.

use nalgebra::DMatrix;

use super::{Matrix, Scalar};
use crate::error::{Error, Result};

pub const SVD_MAX_ITERATIONS: usize = 10_000;

/// Singular values in descending order, computed in f64. Count is `min(rows, cols)`.
pub fn singular_values<T: Scalar>(m: &Matrix<T>) -> Result<Vec<f64>> {
    m.check_finite("singular_values")?;
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return Ok(Vec::new());
    }
    let dm = DMatrix::from_row_iterator(r, c, m.data().iter().map(|v| v.to_f64_lossless()));
    let svd = nalgebra::SVD::try_new(dm, false, false, f64::EPSILON, SVD_MAX_ITERATIONS)
        .ok_or_else(|| {
            Error::Numeric(format!("SVD did not converge within {SVD_MAX_ITERATIONS} iterations"))
        })?;
    let mut s: Vec<f64> = svd.singular_values.iter().map(|v| v.max(0.0)).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Number of singular values strictly above `tau · σ₁`; zero for a zero matrix.
pub fn numerical_rank(singular: &[f64], tau: f64) -> usize {
    match singular.first() {
        Some(&s1) if s1 > 0.0 => singular.iter().filter(|&&s| s > tau * s1).count(),
        _ => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_unit_singular_values() {
        let s = singular_values(&Matrix::<f64>::identity(6)).unwrap();
        assert_eq!(s.len(), 6);
        assert!(s.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn rank_one_outer_product() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [2.0, 1.0, -1.0];
        let m = Matrix::from_fn(4, 3, |i, j| u[i] * v[j]);
        let s = singular_values(&m).unwrap();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((s[0] - nu * nv).abs() < 1e-10 * nu * nv);
        assert!(s[1] < 1e-10 && s[2] < 1e-10);
        assert_eq!(numerical_rank(&s, 1e-6), 1);
    }

    #[test]
    fn zero_matrix_rank_is_zero() {
        let s = singular_values(&Matrix::<f32>::zeros(3, 5)).unwrap();
        assert_eq!(numerical_rank(&s, 1e-6), 0);
    }
}
