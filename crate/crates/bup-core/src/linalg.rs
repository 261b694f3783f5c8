//! Small dense linear algebra: Cholesky factorization and triangular solves.
//!
//! The matrices handled here are tiny (one per node-neighborhood, or
//! `(C-1) x (C-1)` for the loss covariance), so a plain O(n^3) factorization
//! is the right tool. Keeping this in-crate also gives the dense
//! Schur-complement path an implementation independent of the closed form
//! it cross-checks.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Lower-triangular Cholesky factor of a symmetric matrix, or `None` if the
/// matrix is not positive definite (a pivot fails to be strictly positive).
pub fn cholesky(a: ArrayView2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "cholesky requires a square matrix");
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Solves `L x = b` for lower-triangular `L` by forward substitution.
pub fn solve_lower(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in 0..n {
        for k in 0..i {
            let xk = x[k];
            x[i] -= l[[i, k]] * xk;
        }
        x[i] /= l[[i, i]];
    }
    x
}

/// Solves `L^T x = b` for lower-triangular `L` by back substitution.
pub fn solve_lower_transpose(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let xk = x[k];
            x[i] -= l[[k, i]] * xk;
        }
        x[i] /= l[[i, i]];
    }
    x
}

/// Solves the SPD system `A x = b` via Cholesky. `None` if `A` is not SPD.
pub fn solve_spd(a: ArrayView2<f64>, b: ArrayView1<f64>) -> Option<Array1<f64>> {
    let l = cholesky(a)?;
    let y = solve_lower(l.view(), b);
    Some(solve_lower_transpose(l.view(), y.view()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_reconstructs_spd_matrix() {
        let a = array![[4.0, 2.0, 0.4], [2.0, 5.0, 1.0], [0.4, 1.0, 3.0]];
        let l = cholesky(a.view()).expect("SPD");
        let recon = l.dot(&l.t());
        for (x, y) in a.iter().zip(recon.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky(a.view()).is_none());
    }

    #[test]
    fn spd_solve_matches_direct_inverse() {
        let a = array![[3.0, 1.0], [1.0, 2.0]];
        let b = array![5.0, 5.0];
        let x = solve_spd(a.view(), b.view()).unwrap();
        // inverse of [[3,1],[1,2]] is [[2,-1],[-1,3]]/5
        assert!((x[0] - (2.0 * 5.0 - 5.0) / 5.0).abs() < 1e-12);
        assert!((x[1] - (-5.0 + 3.0 * 5.0) / 5.0).abs() < 1e-12);
    }
}
