//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Adds `scale * z z'` into the row-major `d x d` buffer `acc`.
pub(crate) fn add_outer(acc: &mut [f64], z: &[f64], scale: f64) {
    let d = z.len();
    for i in 0..d {
        let zi = scale * z[i];
        for j in 0..d {
            acc[i * d + j] += zi * z[j];
        }
    }
}

pub(crate) fn matrix_from_row_major(d: usize, buf: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, buf)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Smallest eigenpair of a symmetric matrix.
pub fn min_eigenpair(m: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let k = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .expect("non-empty matrix");
    (eig.eigenvalues[k], eig.eigenvectors.column(k).into_owned())
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.clone().cholesky().is_some()
}

/// Reciprocal condition number in the 2-norm; zero for a zero matrix.
pub(crate) fn rcond(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    if max == 0.0 || !max.is_finite() {
        0.0
    } else {
        sv.min() / max
    }
}
