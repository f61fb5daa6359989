//! Small dense linear-algebra helpers shared across the estimators.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Reciprocal condition threshold below which a mixing matrix is rejected.
pub const RCOND_MIN: f64 = 1e-12;

/// Inverse via partial-pivot LU together with the reciprocal 1-norm condition number.
pub fn checked_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularMatrix { rcond: 0.0 });
    }
    let inv = m
        .clone()
        .lu()
        .try_inverse()
        .ok_or(Error::SingularMatrix { rcond: 0.0 })?;
    let rcond = 1.0 / (norm_one(m) * norm_one(&inv));
    if !(rcond >= RCOND_MIN) {
        return Err(Error::SingularMatrix { rcond: if rcond.is_finite() { rcond } else { 0.0 } });
    }
    Ok(inv)
}

fn norm_one(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Inverse of a symmetric PSD matrix with eigenvalues floored at
/// `max(1e-10 * lambda_max, 1e-12)`.
#[derive(Debug, Clone)]
pub struct FlooredInverse {
    pub inverse: DMatrix<f64>,
    /// Number of eigenvalues that were raised to the floor.
    pub floored: usize,
}

pub fn floored_inverse(s: &DMatrix<f64>) -> FlooredInverse {
    let mut sym = s.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let lmax = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let floor = (1e-10 * lmax).max(1e-12);
    let mut floored = 0;
    let inv_vals: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            if l < floor || !l.is_finite() {
                floored += 1;
                1.0 / floor
            } else {
                1.0 / l
            }
        })
        .collect();
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= inv_vals[j];
    }
    let mut inverse = scaled * q.transpose();
    symmetrize(&mut inverse);
    FlooredInverse { inverse, floored }
}

/// Inverse of a symmetric positive definite matrix; fails when the spectrum
/// is numerically rank deficient.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym);
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let lmin = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(lmax > 0.0) || !(lmin > 1e-13 * lmax) {
        return Err(Error::Unidentified(format!(
            "information matrix is rank deficient (eigenvalues in [{lmin:e}, {lmax:e}])"
        )));
    }
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col /= eig.eigenvalues[j];
    }
    let mut inv = scaled * q.transpose();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Column-major `vec` of a square matrix.
pub fn vec_of(m: &DMatrix<f64>) -> Vec<f64> {
    m.as_slice().to_vec()
}

pub fn unvec(v: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(n, n, v)
}

/// Lower Cholesky factor of the sample covariance (uncentered when `center` is false).
pub fn covariance_cholesky(u: &DMatrix<f64>, center: bool) -> Result<DMatrix<f64>> {
    let t = u.nrows() as f64;
    let mut x = u.clone();
    if center {
        for mut col in x.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
    }
    let mut cov = x.transpose() * &x / t;
    symmetrize(&mut cov);
    cov.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::SingularMatrix { rcond: 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_rejects_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(checked_inverse(&m), Err(Error::SingularMatrix { .. })));
        let near = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 + 1e-14]);
        assert!(checked_inverse(&near).is_err());
        let ok = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 3.0]);
        let inv = checked_inverse(&ok).unwrap();
        assert!(((&ok * inv) - DMatrix::identity(2, 2)).amax() < 1e-15);
    }

    #[test]
    fn floored_inverse_of_rank_one() {
        let v = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let s = &v * v.transpose();
        let f = floored_inverse(&s);
        assert_eq!(f.floored, 2);
        assert!(f.inverse.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn floored_inverse_matches_exact_when_well_conditioned() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let f = floored_inverse(&s);
        assert_eq!(f.floored, 0);
        let exact = s.clone().try_inverse().unwrap();
        assert!((f.inverse - exact).amax() < 1e-14);
    }

    #[test]
    fn vec_is_column_major() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(vec_of(&m), vec![1.0, 3.0, 2.0, 4.0]);
        assert_eq!(unvec(&vec_of(&m), 2), m);
    }
}
