//! Long-run covariance `S` and expected Jacobian `G` of the moment conditions
//! under three information sets: serial independence (sample covariance of
//! the moment functions), serial and mutual independence (products of
//! univariate moments), and a known population distribution.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dgp::{ShockDistributionSpec, MAX_MOMENT_ORDER};
use crate::error::{Error, Result};
use crate::linalg::min_eigenvalue;
use crate::moment_index::MomentSystem;
use crate::svar::{Innovations, Kernel, MixingMatrix, ShockPanel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SProvenance {
    Si,
    Smi,
    True,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum GProvenance {
    Empirical,
    Smi,
    True,
}

/// Raw moments `E[e_i^r]` per shock, orders `0..=max_order`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnivariateMomentTable {
    moments: Vec<Vec<f64>>,
}

impl UnivariateMomentTable {
    /// Rows are per shock, starting at order 0.
    pub fn new(moments: Vec<Vec<f64>>) -> Result<Self> {
        if moments.is_empty() {
            return Err(Error::InvalidArgument("moment table needs at least one shock".into()));
        }
        let len = moments[0].len();
        if len < 2 {
            return Err(Error::InvalidArgument("moment table needs orders 0 and 1".into()));
        }
        for row in &moments {
            if row.len() != len {
                return Err(Error::DimensionMismatch("ragged moment table".into()));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("non-finite moment".into()));
            }
        }
        Ok(Self { moments })
    }

    /// Population table for standardized shocks; requires finite order-8
    /// moments for every shock.
    pub fn from_specs(specs: &[ShockDistributionSpec]) -> Result<Self> {
        let moments = specs
            .iter()
            .map(|s| s.population_moments(MAX_MOMENT_ORDER))
            .collect::<Result<Vec<_>>>()?;
        Self::new(moments)
    }

    /// Sample moments of the innovations, orders `0..=max_order`.
    pub fn from_innovations(e: &Innovations, max_order: usize) -> Result<Self> {
        Self::new(e.raw_moments(max_order))
    }

    pub fn n(&self) -> usize {
        self.moments.len()
    }

    pub fn max_order(&self) -> usize {
        self.moments[0].len() - 1
    }

    pub fn get(&self, shock: usize, order: usize) -> f64 {
        self.moments[shock][order]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.moments
    }

    fn require(&self, order: usize) -> Result<()> {
        if self.max_order() < order {
            return Err(Error::MissingMoment { shock: 0, order });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrixS {
    pub matrix: DMatrix<f64>,
    pub provenance: SProvenance,
}

impl CovarianceMatrixS {
    /// Smallest eigenvalue relative to the largest absolute entry.
    pub fn relative_min_eigenvalue(&self) -> f64 {
        let scale = self.matrix.amax().max(f64::MIN_POSITIVE);
        min_eigenvalue(&self.matrix) / scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientMatrixG {
    pub matrix: DMatrix<f64>,
    pub provenance: GProvenance,
}

/// Joint moments `E[prod_i e_i^{k_i}]` of a shock vector.
#[derive(Debug, Clone)]
pub enum JointMoments {
    /// Mutually independent shocks.
    Factorized(UnivariateMomentTable),
    /// Independent standardized base shocks multiplied by a common
    /// two-regime scale `s` (probability `prob`) and divided by
    /// `sqrt(prob s^2 + 1 - prob)`.
    CommonVolatility { base: UnivariateMomentTable, prob: f64, scale: f64 },
}

impl JointMoments {
    pub fn n(&self) -> usize {
        match self {
            Self::Factorized(t) => t.n(),
            Self::CommonVolatility { base, .. } => base.n(),
        }
    }

    fn max_order(&self) -> usize {
        match self {
            Self::Factorized(t) => t.max_order(),
            Self::CommonVolatility { base, .. } => base.max_order(),
        }
    }

    pub fn moment(&self, k: &[usize]) -> f64 {
        match self {
            Self::Factorized(t) => k.iter().enumerate().map(|(i, &r)| t.get(i, r)).product(),
            Self::CommonVolatility { base, prob, scale } => {
                let total: usize = k.iter().sum();
                let norm = (prob * scale * scale + 1.0 - prob).sqrt();
                let regime = (prob * scale.powi(total as i32) + 1.0 - prob) / norm.powi(total as i32);
                regime * k.iter().enumerate().map(|(i, &r)| base.get(i, r)).product::<f64>()
            }
        }
    }

    /// Population joint moments for the given per-shock specs.
    ///
    /// Shocks are independent unless every spec is a common-volatility spec
    /// with the same regime parameters, in which case the regime is shared.
    pub fn from_specs(specs: &[ShockDistributionSpec]) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidArgument("no shock specs given".into()));
        }
        let cv: Vec<_> = specs
            .iter()
            .filter_map(|s| match s {
                ShockDistributionSpec::CommonVolatility { base, regime_prob, regime_scale } => {
                    Some((base.as_ref().clone(), *regime_prob, *regime_scale))
                }
                _ => None,
            })
            .collect();
        if cv.is_empty() {
            return Ok(Self::Factorized(UnivariateMomentTable::from_specs(specs)?));
        }
        let (_, prob, scale) = cv[0].clone();
        if cv.len() != specs.len() || cv.iter().any(|(_, p, s)| *p != prob || *s != scale) {
            return Err(Error::InvalidArgument(
                "common-volatility shocks must all share the same regime parameters".into(),
            ));
        }
        for s in specs {
            s.validate()?;
            s.population_moments(MAX_MOMENT_ORDER)?;
        }
        let bases: Vec<_> = cv.into_iter().map(|(b, _, _)| b).collect();
        Ok(Self::CommonVolatility { base: UnivariateMomentTable::from_specs(&bases)?, prob, scale })
    }
}

fn exponents_of(sys: &MomentSystem) -> Vec<Vec<usize>> {
    sys.indices()
        .iter()
        .map(|m| m.exponents().iter().map(|&e| e as usize).collect())
        .collect()
}

/// `S` implied by a joint-moment oracle.
pub fn s_from_joint(joint: &JointMoments, sys: &MomentSystem) -> Result<DMatrix<f64>> {
    check_n(joint.n(), sys)?;
    let needed = 2 * sys.max_exponent() as usize;
    if joint.max_order() < needed {
        return Err(Error::MissingMoment { shock: 0, order: needed });
    }
    let ex = exponents_of(sys);
    let c = sys.constants();
    let k = ex.len();
    let single: Vec<f64> = ex.iter().map(|m| joint.moment(m)).collect();
    let mut s = DMatrix::zeros(k, k);
    let mut sum = vec![0usize; sys.n()];
    for a in 0..k {
        for b in a..k {
            for (i, v) in sum.iter_mut().enumerate() {
                *v = ex[a][i] + ex[b][i];
            }
            let val = joint.moment(&sum) - c[a] * single[b] - c[b] * single[a] + c[a] * c[b];
            s[(a, b)] = val;
            s[(b, a)] = val;
        }
    }
    Ok(s)
}

/// `G` at `B` implied by a joint-moment oracle for `e(B)`.
pub fn g_from_joint(a: &DMatrix<f64>, joint: &JointMoments, sys: &MomentSystem) -> Result<DMatrix<f64>> {
    let n = sys.n();
    check_n(joint.n(), sys)?;
    if a.nrows() != n || a.ncols() != n {
        return Err(Error::DimensionMismatch("unmixing matrix does not match the system".into()));
    }
    let needed = sys.max_exponent() as usize + 1;
    if joint.max_order() < needed {
        return Err(Error::MissingMoment { shock: 0, order: needed });
    }
    let ex = exponents_of(sys);
    let mut g = DMatrix::zeros(ex.len(), n * n);
    let mut shifted = vec![0usize; n];
    for (k, m) in ex.iter().enumerate() {
        // cross[j][q] = E[prod e^{m - delta_j + delta_q}]
        let mut cross = vec![0.0; n * n];
        for j in 0..n {
            if m[j] == 0 {
                continue;
            }
            for q in 0..n {
                shifted.copy_from_slice(m);
                shifted[j] -= 1;
                shifted[q] += 1;
                cross[j * n + q] = m[j] as f64 * joint.moment(&shifted);
            }
        }
        for q in 0..n {
            for p in 0..n {
                let mut v = 0.0;
                for j in 0..n {
                    v -= a[(j, p)] * cross[j * n + q];
                }
                g[(k, q * n + p)] = v;
            }
        }
    }
    Ok(g)
}

fn check_n(n: usize, sys: &MomentSystem) -> Result<()> {
    if n != sys.n() {
        return Err(Error::DimensionMismatch(format!(
            "moments describe {n} shocks but the system has n = {}",
            sys.n()
        )));
    }
    Ok(())
}

/// Uncentered sample covariance `(1/T) sum_t f_t f_t'` at `B`.
pub fn s_si(b: &MixingMatrix, u: &ShockPanel, sys: &MomentSystem) -> Result<CovarianceMatrixS> {
    let e = Innovations::new(b, u)?;
    Ok(s_si_from(&e, sys))
}

pub fn s_si_from(e: &Innovations, sys: &MomentSystem) -> CovarianceMatrixS {
    let (matrix, _) = e.moment_outer_with(&Kernel::new(sys));
    CovarianceMatrixS { matrix, provenance: SProvenance::Si }
}

/// Factorized `S` from a univariate moment table.
pub fn s_smi(moments: &UnivariateMomentTable, sys: &MomentSystem) -> Result<CovarianceMatrixS> {
    moments.require(2 * sys.max_exponent() as usize)?;
    let matrix = s_from_joint(&JointMoments::Factorized(moments.clone()), sys)?;
    Ok(CovarianceMatrixS { matrix, provenance: SProvenance::Smi })
}

/// Factorized `S` from sample moments of `e(B)`.
pub fn s_smi_empirical(b: &MixingMatrix, u: &ShockPanel, sys: &MomentSystem) -> Result<CovarianceMatrixS> {
    let e = Innovations::new(b, u)?;
    s_smi_empirical_from(&e, sys)
}

pub fn s_smi_empirical_from(e: &Innovations, sys: &MomentSystem) -> Result<CovarianceMatrixS> {
    e.scale_factors()?;
    let table = UnivariateMomentTable::from_innovations(e, 2 * sys.max_exponent() as usize)?;
    s_smi(&table, sys)
}

pub fn g_empirical(b: &MixingMatrix, u: &ShockPanel, sys: &MomentSystem) -> Result<GradientMatrixG> {
    let e = Innovations::new(b, u)?;
    Ok(GradientMatrixG { matrix: e.jacobian(sys)?, provenance: GProvenance::Empirical })
}

/// Factorized `G` at `B` from a univariate moment table of `e(B)`.
pub fn g_smi(b: &MixingMatrix, moments: &UnivariateMomentTable, sys: &MomentSystem) -> Result<GradientMatrixG> {
    moments.require(sys.max_exponent() as usize + 1)?;
    let a = b.inverse()?;
    let matrix = g_from_joint(&a, &JointMoments::Factorized(moments.clone()), sys)?;
    Ok(GradientMatrixG { matrix, provenance: GProvenance::Smi })
}

/// `G` from sample univariate moments of the innovations at `B`.
pub fn g_smi_empirical_from(e: &Innovations, sys: &MomentSystem) -> Result<GradientMatrixG> {
    let table = UnivariateMomentTable::from_innovations(e, sys.max_exponent() as usize + 1)?;
    let matrix = g_from_joint(e.unmixing(), &JointMoments::Factorized(table), sys)?;
    Ok(GradientMatrixG { matrix, provenance: GProvenance::Smi })
}

/// Population `S` for the given shock distributions.
pub fn s_true(dists: &[ShockDistributionSpec], sys: &MomentSystem) -> Result<CovarianceMatrixS> {
    let joint = JointMoments::from_specs(dists)?;
    Ok(CovarianceMatrixS { matrix: s_from_joint(&joint, sys)?, provenance: SProvenance::True })
}

/// Population `G` at the true mixing matrix.
pub fn g_true(b0: &MixingMatrix, dists: &[ShockDistributionSpec], sys: &MomentSystem) -> Result<GradientMatrixG> {
    let joint = JointMoments::from_specs(dists)?;
    let a = b0.inverse()?;
    Ok(GradientMatrixG { matrix: g_from_joint(&a, &joint, sys)?, provenance: GProvenance::True })
}

/// Derivatives of `v' S v` with respect to each univariate moment
/// `mu[i][r]` of a factorized `S`, indexed `[shock][order]`.
pub(crate) fn smi_quadratic_moment_gradient(
    table: &UnivariateMomentTable,
    sys: &MomentSystem,
    v: &DVector<f64>,
) -> Vec<Vec<f64>> {
    let n = sys.n();
    let ex = exponents_of(sys);
    let c = sys.constants();
    let k = ex.len();
    let mu = table.rows();
    let mut grad = vec![vec![0.0; table.max_order() + 1]; n];

    // d/dmu_{i, k_i} of prod_j mu_{j, k_j}
    let add_product = |ks: &dyn Fn(usize) -> usize, weight: f64, grad: &mut Vec<Vec<f64>>| {
        if weight == 0.0 {
            return;
        }
        for i in 0..n {
            let r = ks(i);
            if r == 0 {
                continue;
            }
            let mut others = weight;
            for (j, row) in mu.iter().enumerate() {
                if j != i {
                    others *= row[ks(j)];
                }
            }
            grad[i][r] += others;
        }
    };

    // v'Sv = sum_ab v_a v_b [P(m_a + m_b) - c_a P(m_b) - c_b P(m_a) + c_a c_b]
    for a in 0..k {
        for b in 0..k {
            let w = v[a] * v[b];
            add_product(&|i| ex[a][i] + ex[b][i], w, &mut grad);
        }
    }
    let cv: f64 = (0..k).map(|a| c[a] * v[a]).sum();
    for b in 0..k {
        add_product(&|i| ex[b][i], -2.0 * cv * v[b], &mut grad);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moment_index::{enumerate_moment_indices, MultiIndex};

    fn gaussian_table(n: usize) -> UnivariateMomentTable {
        UnivariateMomentTable::from_specs(&vec![ShockDistributionSpec::Gaussian; n]).unwrap()
    }

    fn pos(sys: &MomentSystem, e: &[u8]) -> usize {
        let m = MultiIndex::new(e.to_vec()).unwrap();
        sys.indices().iter().position(|x| *x == m).unwrap()
    }

    #[test]
    fn gaussian_smi_entries() {
        let sys = MomentSystem::full(2).unwrap();
        let s = s_smi(&gaussian_table(2), &sys).unwrap().matrix;
        let i11 = pos(&sys, &[1, 1]);
        let i20 = pos(&sys, &[2, 0]);
        let i31 = pos(&sys, &[3, 1]);
        let i13 = pos(&sys, &[1, 3]);
        assert_eq!(s[(i11, i11)], 1.0);
        assert_eq!(s[(i20, i20)], 2.0);
        assert_eq!(s[(i31, i13)], 9.0);
        assert_eq!(s, s.transpose());
    }

    #[test]
    fn rank_one_for_single_observation() {
        let sys = MomentSystem::full(2).unwrap();
        let u = ShockPanel::from_rows(&[vec![0.3, -1.2]]).unwrap();
        let s = s_si(&MixingMatrix::identity(2), &u, &sys).unwrap().matrix;
        let g = crate::svar::sample_moments(&MixingMatrix::identity(2), &u, &sys).unwrap().values;
        assert!((s - &g * g.transpose()).amax() < 1e-14);
    }

    #[test]
    fn univariate_g() {
        let sys = enumerate_moment_indices(1, &[2]).unwrap();
        let g = g_smi(&MixingMatrix::identity(1), &gaussian_table(1), &sys).unwrap().matrix;
        assert_eq!(g[(0, 0)], -2.0);
    }

    #[test]
    fn covariance_condition_gradient_by_hand() {
        let sys = MomentSystem::full(3).unwrap();
        let b = MixingMatrix::from_rows(&[
            vec![2.0, 0.5, 0.1],
            vec![0.3, 1.5, -0.2],
            vec![0.0, 0.4, 1.0],
        ])
        .unwrap();
        let a = b.inverse().unwrap();
        let g = g_smi(&b, &gaussian_table(3), &sys).unwrap().matrix;
        let k = pos(&sys, &[1, 1, 0]);
        // column for b_{p1}: -a_{2p}
        for p in 0..3 {
            assert!((g[(k, p)] + a[(1, p)]).abs() < 1e-14);
        }
    }

    #[test]
    fn s_true_matches_factorized_for_gaussian() {
        let sys = MomentSystem::full(3).unwrap();
        let specs = vec![ShockDistributionSpec::Gaussian; 3];
        assert_eq!(s_true(&specs, &sys).unwrap().matrix, s_smi(&gaussian_table(3), &sys).unwrap().matrix);
    }

    #[test]
    fn s_true_variance_entries() {
        let sys = MomentSystem::full(4).unwrap();
        let i = pos(&sys, &[2, 0, 0, 0]);
        let mix = s_true(&vec![ShockDistributionSpec::benchmark_mixture(); 4], &sys).unwrap();
        assert!((mix.matrix[(i, i)] - 4.414099592).abs() < 1e-8);
        let t = s_true(&vec![ShockDistributionSpec::StudentT { nu: 9.0 }; 4], &sys).unwrap();
        assert!((t.matrix[(i, i)] - 3.2).abs() < 1e-12);
        assert!(mix.relative_min_eigenvalue() > -1e-8);
        assert!(s_true(&vec![ShockDistributionSpec::StudentT { nu: 7.0 }; 4], &sys).is_err());
    }

    #[test]
    fn common_volatility_oracle_reduces_without_regime() {
        let sys = MomentSystem::full(2).unwrap();
        let base = ShockDistributionSpec::benchmark_mixture();
        let cv = ShockDistributionSpec::CommonVolatility {
            base: Box::new(base.clone()),
            regime_prob: 0.0,
            regime_scale: 2.0,
        };
        let a = s_true(&[cv.clone(), cv], &sys).unwrap().matrix;
        let b = s_true(&[base.clone(), base], &sys).unwrap().matrix;
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn missing_orders_are_rejected() {
        let sys = MomentSystem::full(2).unwrap();
        let t = UnivariateMomentTable::new(vec![vec![1.0, 0.0, 1.0, 0.0, 3.0]; 2]).unwrap();
        assert!(matches!(s_smi(&t, &sys), Err(Error::MissingMoment { .. })));
        let short = UnivariateMomentTable::new(vec![vec![1.0, 0.0, 1.0, 0.0]; 2]).unwrap();
        assert!(g_smi(&MixingMatrix::identity(2), &short, &sys).is_err());
        assert!(g_smi(&MixingMatrix::identity(2), &t, &sys).is_ok());
    }

    #[test]
    fn quadratic_moment_gradient_matches_finite_differences() {
        let sys = MomentSystem::full(2).unwrap();
        let mut rows = ShockDistributionSpec::benchmark_mixture().population_moments(6).unwrap();
        rows[1] = 0.03;
        let table = UnivariateMomentTable::new(vec![rows.clone(), rows.iter().map(|x| x * 1.1).collect()]).unwrap();
        let v = DVector::from_iterator(8, (0..8).map(|i| (i as f64 * 0.7).sin()));
        let quad = |t: &UnivariateMomentTable| {
            let s = s_smi(t, &sys).unwrap().matrix;
            (v.transpose() * s * &v)[(0, 0)]
        };
        let grad = smi_quadratic_moment_gradient(&table, &sys, &v);
        for i in 0..2 {
            for r in 1..=6 {
                let h = 1e-6;
                let mut up = table.rows().to_vec();
                let mut dn = up.clone();
                up[i][r] += h;
                dn[i][r] -= h;
                let fd = (quad(&UnivariateMomentTable::new(up).unwrap())
                    - quad(&UnivariateMomentTable::new(dn).unwrap()))
                    / (2.0 * h);
                assert!((fd - grad[i][r]).abs() < 1e-6 * (1.0 + fd.abs()), "{i},{r}: {fd} vs {}", grad[i][r]);
            }
        }
    }
}
