//! Small dense linear-algebra kernels: Cholesky factorization and solves for
//! symmetric positive-definite systems.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::num::Scalar;

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
///
/// Fails with [`Error::Singular`] when a pivot drops below a scale-relative
/// tolerance, which is how rank deficiency of an unregularized normal system
/// surfaces. Exactly singular inputs can otherwise sneak through with a tiny
/// positive pivot after rounding.
pub fn cholesky<S: Scalar>(a: &ArrayView2<S>) -> Result<Array2<S>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dim(format!(
            "cholesky expects a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut diag_max = S::zero();
    for i in 0..n {
        diag_max = diag_max.max(a[[i, i]].abs());
    }
    let tol = S::epsilon() * diag_max * S::from_usize_c(n);
    let mut l = Array2::<S>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= tol {
                    return Err(Error::Singular(format!(
                        "pivot {sum} at row {i} is not positive"
                    )));
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solves `L L^T x = b` given the lower Cholesky factor `L`.
pub fn cholesky_solve<S: Scalar>(l: &ArrayView2<S>, b: &ArrayView1<S>) -> Result<Array1<S>> {
    let n = l.nrows();
    if b.len() != n {
        return Err(Error::Dim(format!(
            "rhs length {} does not match factor size {}",
            b.len(),
            n
        )));
    }
    // forward substitution: L y = b
    let mut y = Array1::<S>::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[[i, k]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    // back substitution: L^T x = y
    let mut x = Array1::<S>::zeros(n);
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[[k, i]] * x[k];
        }
        x[i] = sum / l[[i, i]];
    }
    Ok(x)
}

/// Solves the symmetric positive-definite system `A x = b`.
pub fn solve_spd<S: Scalar>(a: &ArrayView2<S>, b: &ArrayView1<S>) -> Result<Array1<S>> {
    let l = cholesky(a)?;
    cholesky_solve(&l.view(), b)
}

/// Column means of a matrix.
pub fn column_means<S: Scalar>(x: &ArrayView2<S>) -> Array1<S> {
    let n = S::from_usize_c(x.nrows().max(1));
    let mut means = Array1::<S>::zeros(x.ncols());
    for row in x.rows() {
        for (m, v) in means.iter_mut().zip(row.iter()) {
            *m += *v;
        }
    }
    means.mapv_inplace(|v| v / n);
    means
}
