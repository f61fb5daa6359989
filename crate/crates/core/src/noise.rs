//! Signal/noise split of the expected GMM loss and its behaviour under
//! rescaling of the innovations.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::JointMoments;
use crate::error::{Error, Result};
use crate::moment_index::MomentSystem;
use crate::svar::MixingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseDecomposition {
    pub term_quadratic: f64,
    pub term_cross: f64,
    pub term_constant: f64,
    pub total: f64,
}

/// `((1 - 1/T) E[f]' W E[f], trace(W S(B)) / T)`.
pub fn expected_loss_split(w: &DMatrix<f64>, ef: &DVector<f64>, s_of_b: &DMatrix<f64>, t: usize) -> Result<(f64, f64)> {
    check(w, s_of_b, ef)?;
    if t == 0 {
        return Err(Error::InvalidArgument("T must be >= 1".into()));
    }
    let t = t as f64;
    let signal = (1.0 - 1.0 / t) * (ef.transpose() * w * ef)[(0, 0)];
    let noise = (w * s_of_b).trace() / t;
    Ok((signal, noise))
}

fn check(w: &DMatrix<f64>, s: &DMatrix<f64>, ef: &DVector<f64>) -> Result<()> {
    let k = ef.len();
    if w.shape() != (k, k) || s.shape() != (k, k) {
        return Err(Error::DimensionMismatch("W, S and E[f] are not conformable".into()));
    }
    Ok(())
}

/// `1 / prod_i d_i^{m_ki}` per condition.
pub fn inverse_scale_products(sys: &MomentSystem, d: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        sys.len(),
        sys.indices()
            .iter()
            .map(|m| 1.0 / m.support().map(|(i, e)| d[i].powi(e as i32)).product::<f64>()),
    )
}

/// Noise term `trace(W S(B D)) / T` split into the parts driven by `S(B)`,
/// by `E[f(B)]`, and by the constants `c(m)`. Exact for any symmetric `W`:
/// with `Dt = diag(1 / prod d^m)` and `f(BD) = Dt f(B) + (Dt - I) c`,
/// the three terms are `tr(W Dt S Dt)`, `2 tr(W Dt E[f] c' (Dt - I))`
/// and `tr(W (Dt - I) c c' (Dt - I))`, each divided by `T`.
pub fn noise_decomposition(
    w: &DMatrix<f64>,
    d: &[f64],
    sys: &MomentSystem,
    s_of_b: &DMatrix<f64>,
    ef: &DVector<f64>,
    t: usize,
) -> Result<NoiseDecomposition> {
    check(w, s_of_b, ef)?;
    if d.len() != sys.n() || d.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("scaling must have n positive entries".into()));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("T must be >= 1".into()));
    }
    let delta = inverse_scale_products(sys, d);
    let c = DVector::from_column_slice(sys.constants());
    let dt = DMatrix::from_diagonal(&delta);
    let dm = DMatrix::from_diagonal(&delta.map(|v| v - 1.0));
    let t = t as f64;
    let term_quadratic = (w * &dt * s_of_b * &dt).trace() / t;
    // tr(W Dt Ef c' (Dt - I)) = c' (Dt - I) W Dt Ef
    let dc = &dm * &c;
    let term_cross = 2.0 * (dc.transpose() * w * (&dt * ef))[(0, 0)] / t;
    let term_constant = (dc.transpose() * w * &dc)[(0, 0)] / t;
    Ok(NoiseDecomposition {
        term_quadratic,
        term_cross,
        term_constant,
        total: term_quadratic + term_cross + term_constant,
    })
}

/// Derivative of the noise term at `W = S(B0)^-1`, `D = I` in each scaling
/// direction: `-2 sum_k m_kl / T`.
pub fn noise_gradient_at_identity(sys: &MomentSystem, t: usize) -> Vec<f64> {
    let mut out = vec![0.0; sys.n()];
    for m in sys.indices() {
        for (l, e) in m.support() {
            out[l] += e as f64;
        }
    }
    out.iter().map(|s| -2.0 * s / t as f64).collect()
}

type Poly = BTreeMap<Vec<u8>, f64>;

fn poly_mul(a: &Poly, b: &Poly) -> Poly {
    let mut out = Poly::new();
    for (ka, va) in a {
        for (kb, vb) in b {
            let k: Vec<u8> = ka.iter().zip(kb).map(|(x, y)| x + y).collect();
            *out.entry(k).or_insert(0.0) += va * vb;
        }
    }
    out
}

/// Exact population `E[f(B, u)]` and `S(B) = E[f f']` when `u = B0 e` and
/// the structural shocks have the given joint moments.
#[derive(Debug, Clone)]
pub struct PopulationOracle {
    pub b0: MixingMatrix,
    pub joint: JointMoments,
}

impl PopulationOracle {
    pub fn new(b0: MixingMatrix, joint: JointMoments) -> Result<Self> {
        if b0.n() != joint.n() {
            return Err(Error::DimensionMismatch("B0 and shock moments disagree on n".into()));
        }
        Ok(Self { b0, joint })
    }

    /// Polynomials in the structural shocks for each `f_k(B)`.
    fn moment_polys(&self, b: &MixingMatrix, sys: &MomentSystem) -> Result<Vec<Poly>> {
        let n = sys.n();
        let m = b.inverse()? * self.b0.matrix();
        let linear: Vec<Poly> = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| m[(i, j)] != 0.0)
                    .map(|j| {
                        let mut k = vec![0u8; n];
                        k[j] = 1;
                        (k, m[(i, j)])
                    })
                    .collect()
            })
            .collect();
        let one: Poly = [(vec![0u8; n], 1.0)].into_iter().collect();
        Ok(sys
            .indices()
            .iter()
            .zip(sys.constants())
            .map(|(idx, &c)| {
                let mut p = one.clone();
                for (i, e) in idx.support() {
                    for _ in 0..e {
                        p = poly_mul(&p, &linear[i]);
                    }
                }
                *p.entry(vec![0u8; n]).or_insert(0.0) -= c;
                p
            })
            .collect())
    }

    fn expect(&self, p: &Poly) -> f64 {
        p.iter()
            .map(|(k, v)| v * self.joint.moment(&k.iter().map(|&e| e as usize).collect::<Vec<_>>()))
            .sum()
    }

    pub fn moments(&self, b: &MixingMatrix, sys: &MomentSystem) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if sys.n() != self.b0.n() {
            return Err(Error::DimensionMismatch("system does not match B0".into()));
        }
        let polys = self.moment_polys(b, sys)?;
        let k = polys.len();
        let ef = DVector::from_iterator(k, polys.iter().map(|p| self.expect(p)));
        let mut s = DMatrix::zeros(k, k);
        for a in 0..k {
            for c in a..k {
                let v = self.expect(&poly_mul(&polys[a], &polys[c]));
                s[(a, c)] = v;
                s[(c, a)] = v;
            }
        }
        Ok((ef, s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::s_true;
    use crate::dgp::ShockDistributionSpec;

    fn mixture_oracle(n: usize) -> PopulationOracle {
        let specs = vec![ShockDistributionSpec::benchmark_mixture(); n];
        let b0 = MixingMatrix::new(DMatrix::from_fn(n, n, |i, j| if i == j { 10.0 } else if i > j { 5.0 } else { 0.0 })).unwrap();
        PopulationOracle::new(b0, JointMoments::from_specs(&specs).unwrap()).unwrap()
    }

    #[test]
    fn oracle_matches_s_true_at_b0() {
        let o = mixture_oracle(3);
        let sys = MomentSystem::full(3).unwrap();
        let (ef, s) = o.moments(&o.b0.clone(), &sys).unwrap();
        assert!(ef.amax() < 1e-12);
        let st = s_true(&vec![ShockDistributionSpec::benchmark_mixture(); 3], &sys).unwrap().matrix;
        assert!((s - st).amax() < 1e-10);
    }

    #[test]
    fn identity_scaling_keeps_only_quadratic_term() {
        let sys = MomentSystem::full(2).unwrap();
        let o = mixture_oracle(2);
        let b = MixingMatrix::from_rows(&[vec![9.0, 1.0], vec![4.0, 11.0]]).unwrap();
        let (ef, s) = o.moments(&b, &sys).unwrap();
        let w = DMatrix::identity(8, 8);
        let dec = noise_decomposition(&w, &[1.0, 1.0], &sys, &s, &ef, 50).unwrap();
        assert_eq!(dec.term_cross, 0.0);
        assert_eq!(dec.term_constant, 0.0);
        assert!((dec.total - s.trace() / 50.0).abs() < 1e-14 * dec.total);
    }

    #[test]
    fn decomposition_equals_direct_noise_term() {
        let sys = MomentSystem::full(2).unwrap();
        let o = mixture_oracle(2);
        let b = MixingMatrix::from_rows(&[vec![9.0, 1.0], vec![4.0, 11.0]]).unwrap();
        let d = [0.8, 1.3];
        let (ef, s) = o.moments(&b, &sys).unwrap();
        let a = DMatrix::from_fn(8, 8, |i, j| ((i * 3 + j) as f64).sin());
        let w = a.transpose() * a;
        let dec = noise_decomposition(&w, &d, &sys, &s, &ef, 200).unwrap();
        let bd = MixingMatrix::new(b.matrix() * DMatrix::from_diagonal(&DVector::from_row_slice(&d))).unwrap();
        let (_, s_bd) = o.moments(&bd, &sys).unwrap();
        let direct = (&w * s_bd).trace() / 200.0;
        assert!((dec.total - direct).abs() < 1e-10 * direct.abs());
    }

    #[test]
    fn gradient_for_bivariate_system() {
        let sys = MomentSystem::full(2).unwrap();
        let g = noise_gradient_at_identity(&sys, 100);
        assert_eq!(g, vec![-0.24, -0.24]);
    }

    #[test]
    fn split_edge_cases() {
        let w = DMatrix::identity(2, 2);
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.1, 3.0]);
        let (sig, noise) = expected_loss_split(&w, &DVector::zeros(2), &s, 10).unwrap();
        assert_eq!(sig, 0.0);
        assert!((noise - 0.5).abs() < 1e-15);
        let (sig, noise) = expected_loss_split(&w, &DVector::from_vec(vec![1.0, 1.0]), &s, 1).unwrap();
        assert_eq!(sig, 0.0);
        assert_eq!(noise, 5.0);
        let winv = s.clone().try_inverse().unwrap();
        let (_, noise) = expected_loss_split(&winv, &DVector::zeros(2), &s, 10).unwrap();
        assert!((noise - 0.2).abs() < 1e-15);
    }
}
