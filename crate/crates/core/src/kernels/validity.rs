//! Gram construction and numerical checks of symmetry and positive
//! semi-definiteness.

use nalgebra::{DMatrix, SymmetricEigen};

use super::rows_of;
use crate::covariance::Covariance;
use crate::error::{contract, numerical, Result};

/// Pairwise kernel values between two point sets.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub values: DMatrix<f64>,
    /// Whether both sides were the same point set (and the matrix is
    /// therefore exactly symmetric).
    pub same_points: bool,
}

/// Gram matrix of `kernel` between the rows of `x` and `x_prime`.
///
/// When both sets are equal the symmetric path is used, so the result is
/// bit-for-bit equal to its transpose.
pub fn gram<K: Covariance + ?Sized>(
    kernel: &K,
    x: &DMatrix<f64>,
    x_prime: &DMatrix<f64>,
) -> Result<GramMatrix> {
    let same_points = x == x_prime;
    let values = if same_points {
        kernel.gram_sym(x)?
    } else {
        kernel.gram(x, x_prime)?
    };
    if let Some((i, j)) = first_non_finite(&values) {
        return Err(numerical(format!(
            "kernel produced {} at Gram entry ({i}, {j})",
            values[(i, j)]
        )));
    }
    Ok(GramMatrix {
        values,
        same_points,
    })
}

pub(crate) fn first_non_finite(m: &DMatrix<f64>) -> Option<(usize, usize)> {
    m.iter().position(|v| !v.is_finite()).map(|k| (k % m.nrows(), k / m.nrows()))
}

/// Outcome of [`validate_kernel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ValidityReport {
    pub symmetric: bool,
    /// Largest relative asymmetry `|c(x,x') - c(x',x)| / max(1, |c(x,x')|)`.
    pub max_asymmetry: f64,
    /// Smallest eigenvalue of each point set's (symmetrized) Gram matrix.
    pub min_eigenvalues: Vec<f64>,
    pub psd: bool,
}

/// Checks symmetry and positive semi-definiteness of an arbitrary
/// two-argument function on the given point sets, using `tol` for both.
pub fn validate_kernel<F>(c: F, point_sets: &[DMatrix<f64>], tol: f64) -> Result<ValidityReport>
where
    F: Fn(&[f64], &[f64]) -> Result<f64>,
{
    validate_kernel_with(c, point_sets, tol, tol)
}

/// As [`validate_kernel`] with separate symmetry and PSD tolerances.
///
/// A set passes the PSD check when its minimum eigenvalue is at least
/// `-psd_tol * n * max|C_ij|`.
pub fn validate_kernel_with<F>(
    c: F,
    point_sets: &[DMatrix<f64>],
    symmetry_tol: f64,
    psd_tol: f64,
) -> Result<ValidityReport>
where
    F: Fn(&[f64], &[f64]) -> Result<f64>,
{
    if !(symmetry_tol > 0.0 && psd_tol > 0.0) {
        return Err(contract("validation tolerances must be positive"));
    }
    let mut max_asymmetry: f64 = 0.0;
    let mut symmetric = true;
    let mut psd = true;
    let mut min_eigenvalues = Vec::with_capacity(point_sets.len());
    for set in point_sets {
        let n = set.nrows();
        if n == 0 {
            return Err(contract("point sets must contain at least one point"));
        }
        let rows = rows_of(set);
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = c(&rows[i], &rows[j])?;
            }
        }
        if let Some((i, j)) = first_non_finite(&m) {
            return Err(numerical(format!("kernel produced {} at ({i}, {j})", m[(i, j)])));
        }
        for i in 0..n {
            for j in i + 1..n {
                let rel = (m[(i, j)] - m[(j, i)]).abs() / m[(i, j)].abs().max(1.0);
                max_asymmetry = max_asymmetry.max(rel);
                if rel > symmetry_tol {
                    symmetric = false;
                }
            }
        }
        let sym = (&m + m.transpose()) * 0.5;
        let scale = sym.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let eig = SymmetricEigen::try_new(sym, 1e-14, 10_000)
            .ok_or_else(|| numerical(format!("eigen-decomposition of a {n}x{n} Gram did not converge")))?;
        let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -psd_tol * n as f64 * scale {
            psd = false;
        }
        min_eigenvalues.push(min);
    }
    Ok(ValidityReport {
        symmetric,
        max_asymmetry,
        min_eigenvalues,
        psd,
    })
}
