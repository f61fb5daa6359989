//! Reduced-form VAR simulation and least-squares estimation.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::svar::{MixingMatrix, ShockPanel};

/// `y_t = sum_p A_p y_{t-p} + B0 e_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarSpec {
    /// Lag matrices as row-major nested arrays.
    pub lags: Vec<Vec<Vec<f64>>>,
    pub b0: MixingMatrix,
}

impl VarSpec {
    pub fn n(&self) -> usize {
        self.b0.n()
    }

    pub fn order(&self) -> usize {
        self.lags.len()
    }

    pub fn lag_matrices(&self) -> Result<Vec<DMatrix<f64>>> {
        let n = self.n();
        self.lags
            .iter()
            .map(|rows| {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::DimensionMismatch(format!("lag matrices must be {n}x{n}")));
                }
                Ok(DMatrix::from_row_slice(n, n, &rows.concat()))
            })
            .collect()
    }

    /// Spectral radius of the companion matrix.
    pub fn spectral_radius(&self) -> Result<f64> {
        let a = self.lag_matrices()?;
        let (n, p) = (self.n(), a.len());
        if p == 0 {
            return Ok(0.0);
        }
        let mut c = DMatrix::zeros(n * p, n * p);
        for (l, m) in a.iter().enumerate() {
            c.view_mut((0, l * n), (n, n)).copy_from(m);
        }
        for i in 0..n * (p - 1) {
            c[(n + i, i)] = 1.0;
        }
        let eig = c.complex_eigenvalues();
        Ok(eig.iter().map(|z| z.norm()).fold(0.0, f64::max))
    }
}

/// Simulates `shocks.nrows() - burn_in` observations from zero initial
/// states, dropping the first `burn_in` rows.
pub fn simulate_var(spec: &VarSpec, shocks: &DMatrix<f64>, burn_in: usize) -> Result<DMatrix<f64>> {
    let n = spec.n();
    if shocks.ncols() != n {
        return Err(Error::DimensionMismatch(format!("shock panel must have {n} columns")));
    }
    if shocks.nrows() <= burn_in {
        return Err(Error::InvalidArgument("burn-in consumes the whole sample".into()));
    }
    let rho = spec.spectral_radius()?;
    if !(rho < 1.0) {
        return Err(Error::InvalidArgument(format!("VAR is not stationary (spectral radius {rho:.4})")));
    }
    let a = spec.lag_matrices()?;
    let b = spec.b0.matrix();
    let total = shocks.nrows();
    let mut y = DMatrix::zeros(total, n);
    for t in 0..total {
        let mut row = b * shocks.row(t).transpose();
        for (l, al) in a.iter().enumerate() {
            if t > l {
                row += al * y.row(t - l - 1).transpose();
            }
        }
        y.row_mut(t).copy_from(&row.transpose());
    }
    Ok(y.rows(burn_in, total - burn_in).into_owned())
}

#[derive(Debug, Clone)]
pub struct VarFit {
    pub lags: Vec<DMatrix<f64>>,
    pub intercept: Option<Vec<f64>>,
    /// `(T - P) x n` residuals.
    pub residuals: ShockPanel,
}

/// Equation-by-equation least squares with `p` lags.
pub fn ols_var(y: &DMatrix<f64>, p: usize, intercept: bool) -> Result<VarFit> {
    let (t, n) = (y.nrows(), y.ncols());
    if p == 0 && !intercept {
        return Ok(VarFit { lags: Vec::new(), intercept: None, residuals: ShockPanel::new(y.clone())? });
    }
    let c = usize::from(intercept);
    if t <= n * p + c + 1 {
        return Err(Error::InvalidArgument(format!("need T > nP + 1, got T = {t} with n = {n}, P = {p}")));
    }
    let rows = t - p;
    let k = n * p + c;
    let mut x = DMatrix::zeros(rows, k);
    for r in 0..rows {
        if intercept {
            x[(r, 0)] = 1.0;
        }
        for l in 0..p {
            for j in 0..n {
                x[(r, c + l * n + j)] = y[(p + r - l - 1, j)];
            }
        }
    }
    let target = y.rows(p, rows).into_owned();
    let xtx = x.transpose() * &x;
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::SingularMatrix { rcond: 0.0 })?;
    let eig = SymmetricEigen::new(x.transpose() * &x).eigenvalues;
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    if !(lo > 1e-12 * hi) {
        return Err(Error::SingularMatrix { rcond: lo / hi });
    }
    let coef = chol.solve(&(x.transpose() * &target));
    let resid = &target - &x * &coef;
    let lags = (0..p)
        .map(|l| coef.rows(c + l * n, n).transpose())
        .collect();
    let intercept = intercept.then(|| coef.row(0).iter().copied().collect());
    Ok(VarFit { lags, intercept, residuals: ShockPanel::new(resid)? })
}
