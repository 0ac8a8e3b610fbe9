//! Central finite differences, the independent check on [`Tape::backward`](super::Tape::backward).

use super::Matrix;
use crate::error::{Error, Result};

/// `(f(p + h) − f(p − h)) / 2h` for every coordinate of every parameter.
pub fn finite_diff_grad<F>(mut f: F, params: &[Matrix<f64>], step: f64) -> Result<Vec<Matrix<f64>>>
where
    F: FnMut(&[Matrix<f64>]) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Argument(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut work = params.to_vec();
    let mut eval = |work: &[Matrix<f64>]| -> Result<f64> {
        let v = f(work)?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let (rows, cols) = params[p].shape();
        let mut g = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let orig = params[p].get(i, j);
                work[p].set(i, j, orig + step);
                let plus = eval(&work)?;
                work[p].set(i, j, orig - step);
                let minus = eval(&work)?;
                work[p].set(i, j, orig);
                g.set(i, j, (plus - minus) / (2.0 * step));
            }
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Largest `|a − b| / max(|a|, |b|, floor)` over all coordinates.
pub fn max_relative_error(a: &[Matrix<f64>], b: &[Matrix<f64>], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
