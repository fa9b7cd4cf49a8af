//! Small dense linear-algebra helpers shared by the solvers and the combiner.
//!
//! All symmetric solves go through one jitter policy: try the plain Cholesky
//! factorization first, then add `r * trace(A)/p` to the diagonal with `r`
//! escalating from 1e-10 by factors of 10 up to 1e-6 before giving up.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

fn jitter_base(a: &DMatrix<f64>) -> f64 {
    let p = a.nrows().max(1) as f64;
    let tr = a.trace().abs();
    if tr > 0.0 {
        tr / p
    } else {
        1.0
    }
}

fn cholesky_with_jitter(
    a: &DMatrix<f64>,
    context: &str,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol);
    }
    let base = jitter_base(a);
    for rel in JITTER_LADDER {
        let mut jittered = a.clone();
        for i in 0..a.nrows() {
            jittered[(i, i)] += rel * base;
        }
        if let Some(chol) = jittered.cholesky() {
            return Ok(chol);
        }
    }
    Err(Error::Singular(context.to_string()))
}

/// Solves `A x = b` for symmetric positive (semi)definite `A`.
pub fn sym_solve(a: &DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    let chol = cholesky_with_jitter(a, context)?;
    Ok(chol.solve(b))
}

/// Solves `A X = B` column-wise for symmetric positive (semi)definite `A`.
pub fn sym_solve_mat(a: &DMatrix<f64>, b: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let chol = cholesky_with_jitter(a, context)?;
    Ok(chol.solve(b))
}

/// Inverse of a symmetric positive (semi)definite matrix under the jitter policy.
pub fn sym_inv(a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let chol = cholesky_with_jitter(a, context)?;
    Ok(chol.inverse())
}

/// Forces exact symmetry, averaging away floating-point asymmetry.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (a + a.transpose())
}

/// Accumulates `w * x x^T` into `acc`.
pub fn add_scaled_outer(acc: &mut DMatrix<f64>, w: f64, x: &DVector<f64>) {
    let p = x.len();
    for j in 0..p {
        let wxj = w * x[j];
        for i in 0..p {
            acc[(i, j)] += x[i] * wxj;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let eig = nalgebra::SymmetricEigen::new(symmetrize(a));
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Columns that make a Gram matrix rank deficient, found by pivoted
/// Gaussian elimination with a relative pivot threshold.
pub fn deficient_columns(gram: &DMatrix<f64>) -> Vec<usize> {
    let p = gram.nrows();
    let mut a = gram.clone();
    let scale = (0..p).map(|i| a[(i, i)].abs()).fold(0.0_f64, f64::max).max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale;
    let mut bad = Vec::new();
    for j in 0..p {
        let pivot = a[(j, j)];
        if pivot <= tol {
            bad.push(j);
            continue;
        }
        for r in (j + 1)..p {
            let f = a[(r, j)] / pivot;
            for c in j..p {
                a[(r, c)] -= f * a[(j, c)];
            }
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn solve_well_conditioned() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let x = sym_solve(&a, &b, "test").unwrap();
        let r = &a * &x - &b;
        assert!(r.amax() < 1e-12);
    }

    #[test]
    fn jitter_rescues_semidefinite() {
        // rank-1 PSD matrix; plain Cholesky fails, jitter succeeds
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let x = sym_solve(&a, &b, "test").unwrap();
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn indefinite_errors_out() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -5.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(sym_solve(&a, &b, "test"), Err(Error::Singular(_))));
    }

    #[test]
    fn finds_deficient_columns() {
        // column 2 = column 0 + column 1 in the design; the Gram matrix
        // of x rows (1,0,1), (0,1,1) over two obs
        let x1 = DVector::from_vec(vec![1.0, 0.0, 1.0]);
        let x2 = DVector::from_vec(vec![0.0, 1.0, 1.0]);
        let mut gram = DMatrix::zeros(3, 3);
        add_scaled_outer(&mut gram, 1.0, &x1);
        add_scaled_outer(&mut gram, 1.0, &x2);
        let bad = deficient_columns(&gram);
        assert_eq!(bad, vec![2]);
    }

    #[test]
    fn outer_accumulation_matches_gemm() {
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let mut acc = DMatrix::zeros(3, 3);
        add_scaled_outer(&mut acc, 2.0, &x);
        let direct = 2.0 * &x * x.transpose();
        assert_abs_diff_eq!(acc, direct, epsilon = 1e-14);
    }
}
