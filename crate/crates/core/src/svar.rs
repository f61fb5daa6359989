//! Innovation algebra for `u_t = B e_t`: unmixing, stacked sample moments,
//! their analytic Jacobian with respect to `vec(B)`, and the scale diagonal.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::moment_index::MomentSystem;

/// Candidate (or true) impact matrix. Square, finite and numerically invertible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct MixingMatrix(DMatrix<f64>);

impl MixingMatrix {
    pub fn new(b: DMatrix<f64>) -> Result<Self> {
        if !b.is_square() || b.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "mixing matrix must be square and non-empty, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        linalg::checked_inverse(&b)?;
        Ok(Self(b))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch("mixing matrix rows are ragged".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(DMatrix::from_row_slice(n, n, &flat))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        linalg::checked_inverse(&self.0)
    }

    pub fn vec(&self) -> Vec<f64> {
        linalg::vec_of(&self.0)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.0.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for MixingMatrix {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<MixingMatrix> for Vec<Vec<f64>> {
    fn from(b: MixingMatrix) -> Self {
        b.to_rows()
    }
}

/// `T x n` panel of reduced-form shocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ShockPanel {
    data: DMatrix<f64>,
}

impl ShockPanel {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidArgument("shock panel must have T >= 1 and n >= 1".into()));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite entry at row {}, column {}",
                pos % data.nrows(),
                pos / data.nrows()
            )));
        }
        Ok(Self { data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let t = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch("panel rows are ragged".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(DMatrix::from_row_slice(t, n, &flat))
    }

    pub fn t(&self) -> usize {
        self.data.nrows()
    }

    pub fn n(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// Panel with columns reordered so that new column `j` is old column `perm[j]`.
    pub fn permute_columns(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n() {
            return Err(Error::DimensionMismatch("permutation length differs from n".into()));
        }
        let cols: Vec<_> = perm.iter().map(|&j| self.data.column(j).into_owned()).collect();
        Self::new(DMatrix::from_columns(&cols))
    }
}

/// Sample moment vector `g_T(B)`, one entry per condition of the system.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentVector {
    pub values: DVector<f64>,
}

impl MomentVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

const BLOCK: usize = 256;

/// Accumulates `(1/T) sum_t x_t` for vector-valued `x_t` in fixed blocks so
/// that rounding does not grow linearly with `T`.
fn blocked_mean(t: usize, width: usize, mut add_row: impl FnMut(usize, &mut [f64])) -> Vec<f64> {
    let mut total = vec![0.0; width];
    let mut partial = vec![0.0; width];
    let mut start = 0;
    while start < t {
        let end = (start + BLOCK).min(t);
        partial.iter_mut().for_each(|v| *v = 0.0);
        for row in start..end {
            add_row(row, &mut partial);
        }
        for (acc, p) in total.iter_mut().zip(&partial) {
            *acc += p;
        }
        start = end;
    }
    let scale = 1.0 / t as f64;
    total.iter_mut().for_each(|v| *v *= scale);
    total
}

/// Precomputed layout of a moment system for the per-observation kernels.
#[derive(Debug, Clone)]
pub(crate) struct Kernel {
    pub max_pow: usize,
    /// Non-zero `(shock, exponent)` pairs per condition.
    pub support: Vec<Vec<(usize, usize)>>,
    pub constants: Vec<f64>,
}

impl Kernel {
    pub fn new(sys: &MomentSystem) -> Self {
        let support = sys
            .indices()
            .iter()
            .map(|m| m.support().map(|(i, e)| (i, e as usize)).collect())
            .collect();
        Self {
            max_pow: sys.max_exponent() as usize,
            support,
            constants: sys.constants().to_vec(),
        }
    }

    pub fn k(&self) -> usize {
        self.support.len()
    }
}

/// Fills `pw[i * stride + r] = e_i^r` for `r = 0..stride`.
#[inline]
fn power_table(e: &[f64], stride: usize, pw: &mut [f64]) {
    for (i, &x) in e.iter().enumerate() {
        let row = &mut pw[i * stride..(i + 1) * stride];
        row[0] = 1.0;
        for r in 1..stride {
            row[r] = row[r - 1] * x;
        }
    }
}

/// Innovations `e(B)_t = B^{-1} u_t` for a whole panel, computed once and
/// shared by every statistic evaluated at the same `B`.
#[derive(Debug, Clone)]
pub struct Innovations {
    n: usize,
    t: usize,
    a: DMatrix<f64>,
    /// Row-major `T x n`.
    e: Vec<f64>,
}

impl Innovations {
    pub fn new(b: &MixingMatrix, u: &ShockPanel) -> Result<Self> {
        if b.n() != u.n() {
            return Err(Error::DimensionMismatch(format!(
                "mixing matrix is {}x{} but the panel has {} columns",
                b.n(),
                b.n(),
                u.n()
            )));
        }
        let a = b.inverse()?;
        Ok(Self::with_inverse(a, u))
    }

    /// Builds innovations from an already inverted `B`.
    pub(crate) fn with_inverse(a: DMatrix<f64>, u: &ShockPanel) -> Self {
        let (t, n) = (u.t(), u.n());
        let data = u.data();
        let mut e = vec![0.0; t * n];
        for i in 0..n {
            for j in 0..n {
                let aij = a[(i, j)];
                if aij == 0.0 {
                    continue;
                }
                let col = data.column(j);
                for (row, &uj) in col.iter().enumerate() {
                    e[row * n + i] += aij * uj;
                }
            }
        }
        Self { n, t, a, e }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// `A = B^{-1}`.
    pub fn unmixing(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.e[t * self.n..(t + 1) * self.n]
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.t, self.n, &self.e)
    }

    /// Raw sample moments `(1/T) sum_t e_{i,t}^r` for `r = 0..=max_order`,
    /// indexed `[shock][order]`.
    pub fn raw_moments(&self, max_order: usize) -> Vec<Vec<f64>> {
        let n = self.n;
        let stride = max_order + 1;
        let mut pw = vec![0.0; n * stride];
        let flat = blocked_mean(self.t, n * stride, |t, acc| {
            power_table(self.row(t), stride, &mut pw);
            for (a, p) in acc.iter_mut().zip(&pw) {
                *a += p;
            }
        });
        flat.chunks(stride).map(|c| c.to_vec()).collect()
    }

    /// Cross moments `(1/T) sum_t e_{i,t}^s e_{q,t}` for `s = 0..=max_pow`,
    /// flat as `(i * (max_pow + 1) + s) * n + q`.
    pub(crate) fn power_cross_moments(&self, max_pow: usize) -> Vec<f64> {
        let n = self.n;
        let stride = max_pow + 1;
        let mut pw = vec![0.0; n * stride];
        blocked_mean(self.t, n * stride * n, |t, acc| {
            let e = self.row(t);
            power_table(e, stride, &mut pw);
            for (slot, p) in pw.iter().enumerate() {
                let base = slot * n;
                for q in 0..n {
                    acc[base + q] += p * e[q];
                }
            }
        })
    }

    /// Uncentered second moments `(1/T) E'E`.
    pub fn second_moments(&self) -> DMatrix<f64> {
        let n = self.n;
        let flat = blocked_mean(self.t, n * n, |t, acc| {
            let e = self.row(t);
            for q in 0..n {
                for i in 0..n {
                    acc[q * n + i] += e[i] * e[q];
                }
            }
        });
        DMatrix::from_column_slice(n, n, &flat)
    }

    /// Sample variances about zero, `(1/T) sum_t e_{i,t}^2`.
    pub fn variances(&self) -> Vec<f64> {
        let m = self.second_moments();
        (0..self.n).map(|i| m[(i, i)]).collect()
    }

    pub fn moments(&self, sys: &MomentSystem) -> Result<MomentVector> {
        self.check_system(sys)?;
        Ok(MomentVector { values: self.moments_with(&Kernel::new(sys)) })
    }

    pub(crate) fn moments_with(&self, ker: &Kernel) -> DVector<f64> {
        let stride = ker.max_pow + 1;
        let mut pw = vec![0.0; self.n * stride];
        let k = ker.k();
        let means = blocked_mean(self.t, k, |t, acc| {
            power_table(self.row(t), stride, &mut pw);
            for (a, sup) in acc.iter_mut().zip(&ker.support) {
                let mut prod = 1.0;
                for &(i, m) in sup {
                    prod *= pw[i * stride + m];
                }
                *a += prod;
            }
        });
        DVector::from_iterator(k, means.iter().zip(&ker.constants).map(|(m, c)| m - c))
    }

    /// `(1/T) sum_t f_t f_t'` and the sample moments `g_T` in one pass.
    pub(crate) fn moment_outer_with(&self, ker: &Kernel) -> (DMatrix<f64>, DVector<f64>) {
        let stride = ker.max_pow + 1;
        let k = ker.k();
        let mut pw = vec![0.0; self.n * stride];
        let mut f = vec![0.0; k];
        // packed upper triangle followed by the mean
        let tri = k * (k + 1) / 2;
        let acc = blocked_mean(self.t, tri + k, |t, acc| {
            power_table(self.row(t), stride, &mut pw);
            for (idx, sup) in ker.support.iter().enumerate() {
                let mut prod = 1.0;
                for &(i, m) in sup {
                    prod *= pw[i * stride + m];
                }
                f[idx] = prod - ker.constants[idx];
            }
            let mut pos = 0;
            for a in 0..k {
                let fa = f[a];
                for b in a..k {
                    acc[pos] += fa * f[b];
                    pos += 1;
                }
            }
            for a in 0..k {
                acc[tri + a] += f[a];
            }
        });
        let mut s = DMatrix::zeros(k, k);
        let mut pos = 0;
        for a in 0..k {
            for b in a..k {
                s[(a, b)] = acc[pos];
                s[(b, a)] = acc[pos];
                pos += 1;
            }
        }
        (s, DVector::from_column_slice(&acc[tri..]))
    }

    /// Partial derivatives of the monomials with respect to the innovations,
    /// contracted against the innovations: `H[k][j][q] = (1/T) sum_t
    /// d(prod_k)/d e_j * e_q`. Returned flat as `k * n * n + j * n + q`.
    fn derivative_cross_moments(&self, ker: &Kernel) -> Vec<f64> {
        let n = self.n;
        let stride = ker.max_pow + 1;
        let k = ker.k();
        let mut pw = vec![0.0; n * stride];
        blocked_mean(self.t, k * n * n, |t, acc| {
            let e = self.row(t);
            power_table(e, stride, &mut pw);
            for (idx, sup) in ker.support.iter().enumerate() {
                for (pos, &(j, mj)) in sup.iter().enumerate() {
                    let mut d = mj as f64 * pw[j * stride + mj - 1];
                    for (other, &(i, mi)) in sup.iter().enumerate() {
                        if other != pos {
                            d *= pw[i * stride + mi];
                        }
                    }
                    let base = idx * n * n + j * n;
                    for q in 0..n {
                        acc[base + q] += d * e[q];
                    }
                }
            }
        })
    }

    /// `K x n^2` Jacobian of `g_T` with respect to `vec(B)` (column-major).
    pub fn jacobian(&self, sys: &MomentSystem) -> Result<DMatrix<f64>> {
        self.check_system(sys)?;
        Ok(self.jacobian_with(&Kernel::new(sys)))
    }

    pub(crate) fn jacobian_with(&self, ker: &Kernel) -> DMatrix<f64> {
        let n = self.n;
        let k = ker.k();
        let h = self.derivative_cross_moments(ker);
        let mut jac = DMatrix::zeros(k, n * n);
        // d e_j / d b_pq = -a_jp e_q
        for idx in 0..k {
            for q in 0..n {
                for p in 0..n {
                    let mut v = 0.0;
                    for j in 0..n {
                        v -= self.a[(j, p)] * h[idx * n * n + j * n + q];
                    }
                    jac[(idx, q * n + p)] = v;
                }
            }
        }
        jac
    }

    /// Gradient matrix of `(1/T) sum_t w_t v' f(B, u_t)` with respect to `B`,
    /// returned in `vec(B)` order.
    pub(crate) fn weighted_directional_gradient(&self, ker: &Kernel, v: &[f64], w: &[f64]) -> Vec<f64> {
        let n = self.n;
        let stride = ker.max_pow + 1;
        let mut pw = vec![0.0; n * stride];
        let mut c = vec![0.0; n];
        let cross = blocked_mean(self.t, n * n, |t, acc| {
            let e = self.row(t);
            power_table(e, stride, &mut pw);
            c.iter_mut().for_each(|x| *x = 0.0);
            for (idx, sup) in ker.support.iter().enumerate() {
                if v[idx] == 0.0 {
                    continue;
                }
                for (pos, &(j, mj)) in sup.iter().enumerate() {
                    let mut d = mj as f64 * pw[j * stride + mj - 1];
                    for (other, &(i, mi)) in sup.iter().enumerate() {
                        if other != pos {
                            d *= pw[i * stride + mi];
                        }
                    }
                    c[j] += v[idx] * d;
                }
            }
            let wt = w[t];
            for j in 0..n {
                let cj = wt * c[j];
                for q in 0..n {
                    acc[j * n + q] += cj * e[q];
                }
            }
        });
        let mut grad = vec![0.0; n * n];
        for q in 0..n {
            for p in 0..n {
                let mut s = 0.0;
                for j in 0..n {
                    s -= self.a[(j, p)] * cross[j * n + q];
                }
                grad[q * n + p] = s;
            }
        }
        grad
    }

    /// Per-observation moment functions `f(B, u_t)`, `T x K` row-major.
    pub(crate) fn moment_rows(&self, ker: &Kernel) -> Vec<f64> {
        let stride = ker.max_pow + 1;
        let k = ker.k();
        let mut pw = vec![0.0; self.n * stride];
        let mut out = vec![0.0; self.t * k];
        for t in 0..self.t {
            power_table(self.row(t), stride, &mut pw);
            for (idx, sup) in ker.support.iter().enumerate() {
                let mut prod = 1.0;
                for &(i, m) in sup {
                    prod *= pw[i * stride + m];
                }
                out[t * k + idx] = prod - ker.constants[idx];
            }
        }
        out
    }

    /// Inverse sample standard deviations `d_i = (mean e_i^2)^{-1/2}`.
    pub fn scale_factors(&self) -> Result<Vec<f64>> {
        self.variances()
            .into_iter()
            .enumerate()
            .map(|(index, variance)| {
                if variance > 0.0 && variance.is_finite() {
                    Ok(1.0 / variance.sqrt())
                } else {
                    Err(Error::DegenerateInnovation { index, variance })
                }
            })
            .collect()
    }

    /// Diagonal of `D(B)`: `prod_i d_i^{m_{k,i}}` per condition.
    pub fn scale_diagonal(&self, sys: &MomentSystem) -> Result<DVector<f64>> {
        self.check_system(sys)?;
        let d = self.scale_factors()?;
        Ok(scale_diagonal_from_factors(sys, &d))
    }

    fn check_system(&self, sys: &MomentSystem) -> Result<()> {
        if sys.n() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "moment system has n = {} but innovations have n = {}",
                sys.n(),
                self.n
            )));
        }
        Ok(())
    }
}

pub fn scale_diagonal_from_factors(sys: &MomentSystem, d: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        sys.len(),
        sys.indices().iter().map(|m| {
            m.support().map(|(i, e)| d[i].powi(e as i32)).product::<f64>()
        }),
    )
}

pub fn innovations(b: &MixingMatrix, u: &ShockPanel) -> Result<DMatrix<f64>> {
    Ok(Innovations::new(b, u)?.to_matrix())
}

pub fn sample_moments(b: &MixingMatrix, u: &ShockPanel, sys: &MomentSystem) -> Result<MomentVector> {
    Innovations::new(b, u)?.moments(sys)
}

pub fn moment_jacobian(b: &MixingMatrix, u: &ShockPanel, sys: &MomentSystem) -> Result<DMatrix<f64>> {
    Innovations::new(b, u)?.jacobian(sys)
}

pub fn scale_diagonal(b: &MixingMatrix, u: &ShockPanel, sys: &MomentSystem) -> Result<DVector<f64>> {
    Innovations::new(b, u)?.scale_diagonal(sys)
}
