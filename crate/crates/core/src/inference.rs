//! Asymptotic covariance of `vec(B_hat)`, Wald tests and confidence intervals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{self, CovarianceMatrixS, GradientMatrixG};
use crate::dgp::ShockDistributionSpec;
use crate::error::{Error, Result};
use crate::linalg::{floored_inverse, spd_inverse, symmetrize};
use crate::moment_index::MomentSystem;
use crate::special::{chi_square_sf, normal_quantile};
use crate::svar::{Innovations, MixingMatrix, ShockPanel};

/// Which estimates of `S` and `G` feed the covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    /// Factorized univariate moments of the innovations.
    Smi,
    /// Sample covariance of the moment functions and the sample Jacobian.
    Si,
    /// Population moments at the true mixing matrix.
    True,
}

impl Basis {
    pub fn as_str(self) -> &'static str {
        match self {
            Basis::Smi => "smi",
            Basis::Si => "si",
            Basis::True => "true",
        }
    }
}

impl std::str::FromStr for Basis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "smi" => Ok(Basis::Smi),
            "si" => Ok(Basis::Si),
            "true" => Ok(Basis::True),
            other => Err(Error::InvalidArgument(format!("unknown inference basis '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticCovariance {
    /// `n^2 x n^2`, indexed by `vec(B)`.
    pub matrix: DMatrix<f64>,
    pub basis: Basis,
    pub t: usize,
}

impl AsymptoticCovariance {
    /// Finite-sample variance of coefficient `i` of `vec(B_hat)`.
    pub fn variance(&self, i: usize) -> f64 {
        self.matrix[(i, i)] / self.t as f64
    }
}

/// `M S M'` with `M = (G' S^-1 G)^-1 G' W`.
pub fn asymptotic_covariance(g: &DMatrix<f64>, s: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = s.nrows();
    if g.nrows() != k || w.nrows() != k || w.ncols() != k || s.ncols() != k {
        return Err(Error::DimensionMismatch("G, S and W are not conformable".into()));
    }
    let s_inv = floored_inverse(s).inverse;
    let info = g.transpose() * &s_inv * g;
    let bread = spd_inverse(&info)?;
    let m = &bread * g.transpose() * w;
    let mut v = &m * s * m.transpose();
    symmetrize(&mut v);
    Ok(v)
}

/// Estimates of `S` and `G` under `basis`. `dists` is required for the
/// population basis, which is evaluated at `b` taken as the truth.
pub fn basis_matrices(
    basis: Basis,
    b: &MixingMatrix,
    u: &ShockPanel,
    sys: &MomentSystem,
    dists: Option<&[ShockDistributionSpec]>,
) -> Result<(CovarianceMatrixS, GradientMatrixG)> {
    match basis {
        Basis::Si => {
            let e = Innovations::new(b, u)?;
            let s = covariance::s_si_from(&e, sys);
            let g = GradientMatrixG {
                matrix: e.jacobian(sys)?,
                provenance: covariance::GProvenance::Empirical,
            };
            Ok((s, g))
        }
        Basis::Smi => {
            let e = Innovations::new(b, u)?;
            Ok((covariance::s_smi_empirical_from(&e, sys)?, covariance::g_smi_empirical_from(&e, sys)?))
        }
        Basis::True => {
            let dists = dists.ok_or_else(|| {
                Error::InvalidArgument("the true basis needs the shock distributions".into())
            })?;
            Ok((covariance::s_true(dists, sys)?, covariance::g_true(b, dists, sys)?))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Set when `R V R'` had to be regularized.
    pub floored: bool,
}

impl WaldTest {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// `T (R b - r)' [R V R']^-1 (R b - r)` against a chi-square with `rows(R)` dof.
pub fn wald(
    r_mat: &DMatrix<f64>,
    r_vec: &DVector<f64>,
    beta: &DVector<f64>,
    avar: &DMatrix<f64>,
    t: usize,
) -> Result<WaldTest> {
    let q = r_mat.nrows();
    if q == 0 || r_mat.ncols() != beta.len() || r_vec.len() != q || avar.nrows() != beta.len() {
        return Err(Error::DimensionMismatch("restriction is not conformable with the estimate".into()));
    }
    if r_mat.rank(1e-12 * r_mat.amax().max(1e-300)) < q {
        return Err(Error::InvalidArgument("restriction matrix must have full row rank".into()));
    }
    let diff = r_mat * beta - r_vec;
    let middle = r_mat * avar * r_mat.transpose();
    let (inv, floored) = match spd_inverse(&middle) {
        Ok(inv) => (inv, false),
        Err(_) => {
            let f = floored_inverse(&middle);
            (f.inverse, true)
        }
    };
    let statistic = (t as f64 * (diff.transpose() * inv * &diff)[(0, 0)]).max(0.0);
    Ok(WaldTest { statistic, dof: q, p_value: chi_square_sf(statistic, q as f64), floored })
}

/// `beta_i -/+ z_{(1+level)/2} sqrt(V_ii / T)`.
pub fn confidence_interval(index: usize, avar: &DMatrix<f64>, beta: &DVector<f64>, t: usize, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence level {level} outside (0, 1)")));
    }
    if index >= beta.len() {
        return Err(Error::InvalidArgument(format!("coefficient index {index} out of range")));
    }
    let z = normal_quantile(0.5 * (1.0 + level));
    let half = z * (avar[(index, index)].max(0.0) / t as f64).sqrt();
    Ok((beta[index] - half, beta[index] + half))
}

/// Restriction selecting one entry of `vec(B)`: `B[row, col] = value`.
pub fn entry_restriction(n: usize, row: usize, col: usize, value: f64) -> (DMatrix<f64>, DVector<f64>) {
    let mut r = DMatrix::zeros(1, n * n);
    r[(0, col * n + row)] = 1.0;
    (r, DVector::from_element(1, value))
}

/// `B = B0` on every entry.
pub fn full_restriction(b0: &MixingMatrix) -> (DMatrix<f64>, DVector<f64>) {
    let n = b0.n();
    (DMatrix::identity(n * n, n * n), DVector::from_vec(b0.vec()))
}

/// Zero restrictions on the strict upper triangle (a recursive system).
pub fn recursive_restriction(n: usize) -> (DMatrix<f64>, DVector<f64>) {
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|c| (0..c).map(move |r| (r, c))).collect();
    let mut r = DMatrix::zeros(pairs.len(), n * n);
    for (k, (row, col)) in pairs.iter().enumerate() {
        r[(k, col * n + row)] = 1.0;
    }
    (r, DVector::zeros(pairs.len()))
}
