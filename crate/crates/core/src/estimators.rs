//! GMM-type estimators of the impact matrix and column normalization.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covariance::{self, smi_quadratic_moment_gradient, CovarianceMatrixS, GradientMatrixG, UnivariateMomentTable};
use crate::dgp::ShockDistributionSpec;
use crate::error::{Error, Result};
use crate::inference::{self, Basis};
use crate::linalg::{checked_inverse, covariance_cholesky, floored_inverse, spd_inverse, symmetrize, unvec};
use crate::moment_index::MomentSystem;
use crate::optimize::{bfgs, BfgsOptions};
use crate::rng;
use crate::svar::{scale_diagonal_from_factors, Innovations, Kernel, MixingMatrix, ShockPanel};

/// Source of the base weighting matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightingKind {
    Identity,
    Fixed(DMatrix<f64>),
    /// Inverse sample covariance of the moment functions at a reference `B`.
    Si(MixingMatrix),
    /// Inverse factorized covariance at a reference `B`.
    Smi(MixingMatrix),
    /// Inverse population covariance for known shock distributions.
    True(Vec<ShockDistributionSpec>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightingSpec {
    pub kind: WeightingKind,
    /// Use `D(B) W D(B)` instead of `W`.
    pub scale_updating: bool,
}

impl WeightingSpec {
    pub fn identity() -> Self {
        Self { kind: WeightingKind::Identity, scale_updating: false }
    }

    pub fn scaled(mut self) -> Self {
        self.scale_updating = true;
        self
    }

    fn label(&self) -> String {
        let base = match &self.kind {
            WeightingKind::Identity => "identity",
            WeightingKind::Fixed(_) => "fixed",
            WeightingKind::Si(_) => "si",
            WeightingKind::Smi(_) => "smi",
            WeightingKind::True(_) => "true",
        };
        if self.scale_updating {
            format!("{base}+scale")
        } else {
            base.to_string()
        }
    }

    /// Base weighting matrix for `u` and `sys`.
    pub fn resolve(&self, u: &ShockPanel, sys: &MomentSystem) -> Result<(DMatrix<f64>, usize)> {
        let k = sys.len();
        let s = match &self.kind {
            WeightingKind::Identity => return Ok((DMatrix::identity(k, k), 0)),
            WeightingKind::Fixed(w) => {
                if w.nrows() != k || w.ncols() != k {
                    return Err(Error::DimensionMismatch(format!("weighting matrix must be {k}x{k}")));
                }
                if (w - w.transpose()).amax() > 1e-10 * w.amax().max(1.0) {
                    return Err(Error::InvalidArgument("weighting matrix is not symmetric".into()));
                }
                if crate::linalg::min_eigenvalue(w) < -1e-10 * w.amax() {
                    return Err(Error::InvalidArgument("weighting matrix is not positive semi-definite".into()));
                }
                return Ok((w.clone(), 0));
            }
            WeightingKind::Si(b) => covariance::s_si(b, u, sys)?.matrix,
            WeightingKind::Smi(b) => covariance::s_smi_empirical(b, u, sys)?.matrix,
            WeightingKind::True(d) => covariance::s_true(d, sys)?.matrix,
        };
        let f = floored_inverse(&s);
        Ok((f.inverse, f.floored))
    }
}

/// Basis for the continuously updated weighting `S(B)^-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CueBasis {
    Si,
    Smi,
}

/// A fully specified GMM objective.
#[derive(Debug, Clone)]
pub enum Objective {
    Fixed { w: DMatrix<f64>, scale_updating: bool },
    Cue(CueBasis),
}

struct Evaluator<'a> {
    u: &'a ShockPanel,
    sys: &'a MomentSystem,
    ker: Kernel,
    objective: &'a Objective,
    n: usize,
}

impl<'a> Evaluator<'a> {
    fn new(u: &'a ShockPanel, sys: &'a MomentSystem, objective: &'a Objective) -> Self {
        Self { u, sys, ker: Kernel::new(sys), objective, n: sys.n() }
    }

    fn innovations(&self, x: &[f64]) -> Option<Innovations> {
        let b = unvec(x, self.n);
        let a = checked_inverse(&b).ok()?;
        Some(Innovations::with_inverse(a, self.u))
    }

    /// Weighting matrix in effect at the innovations `e`.
    fn weight(&self, e: &Innovations) -> Result<DMatrix<f64>> {
        match self.objective {
            Objective::Fixed { w, scale_updating: false } => Ok(w.clone()),
            Objective::Fixed { w, scale_updating: true } => {
                let d = scale_factors(e, self.sys)?;
                Ok(DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| d[i] * w[(i, j)] * d[j]))
            }
            Objective::Cue(CueBasis::Si) => Ok(floored_inverse(&covariance::s_si_from(e, self.sys).matrix).inverse),
            Objective::Cue(CueBasis::Smi) => {
                Ok(floored_inverse(&covariance::s_smi_empirical_from(e, self.sys)?.matrix).inverse)
            }
        }
    }

    fn loss(&self, x: &[f64]) -> Option<f64> {
        let e = self.innovations(x)?;
        let g = e.moments_with(&self.ker);
        let w = self.weight(&e).ok()?;
        Some((g.transpose() * w * g)[(0, 0)])
    }

    fn value_and_gradient(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let e = self.innovations(x)?;
        let n = self.n;
        let jac = e.jacobian_with(&self.ker);
        match self.objective {
            Objective::Fixed { w, scale_updating: false } => {
                let g = e.moments_with(&self.ker);
                let v = w * &g;
                let loss = g.dot(&v);
                let grad = (jac.transpose() * v * 2.0).as_slice().to_vec();
                Some((loss, grad))
            }
            Objective::Fixed { w, scale_updating: true } => {
                let g = e.moments_with(&self.ker);
                let sigma2 = e.second_moments();
                let dfac: Vec<f64> = (0..n)
                    .map(|i| {
                        let v = sigma2[(i, i)];
                        (v > 0.0 && v.is_finite()).then(|| 1.0 / v.sqrt())
                    })
                    .collect::<Option<_>>()?;
                let dk = scale_diagonal_from_factors(self.sys, &dfac);
                let gt = dk.component_mul(&g);
                let v = w * &gt;
                let loss = gt.dot(&v);
                // d(D_k)/d b_pq = D_k sum_i m_ki a_ip Sigma_iq / sigma_i^2
                let dv = dk.component_mul(&v);
                let mut grad = jac.transpose() * &dv * 2.0;
                let gv = g.component_mul(&v);
                let mut c = vec![0.0; n];
                for (k, m) in self.sys.indices().iter().enumerate() {
                    for (i, mi) in m.support() {
                        c[i] += gv[k] * dk[k] * mi as f64;
                    }
                }
                let a = e.unmixing();
                for q in 0..n {
                    for p in 0..n {
                        let mut s = 0.0;
                        for i in 0..n {
                            s += c[i] * a[(i, p)] * sigma2[(i, q)] / sigma2[(i, i)];
                        }
                        grad[q * n + p] += 2.0 * s;
                    }
                }
                Some((loss, grad.as_slice().to_vec()))
            }
            Objective::Cue(CueBasis::Si) => {
                let (s, g) = e.moment_outer_with(&self.ker);
                let w = floored_inverse(&s).inverse;
                let v = &w * &g;
                let loss = g.dot(&v);
                // d(v' S v) at fixed v = (2/T) sum_t (v'f_t)(v' df_t)
                let rows = e.moment_rows(&self.ker);
                let k = self.ker.k();
                let weights: Vec<f64> = rows
                    .chunks(k)
                    .map(|f| 2.0 * f.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>())
                    .collect();
                let quad = e.weighted_directional_gradient(&self.ker, v.as_slice(), &weights);
                let mut grad = (jac.transpose() * &v * 2.0).as_slice().to_vec();
                grad.iter_mut().zip(&quad).for_each(|(a, b)| *a -= b);
                Some((loss, grad))
            }
            Objective::Cue(CueBasis::Smi) => {
                let g = e.moments_with(&self.ker);
                let top = 2 * self.sys.max_exponent() as usize;
                let table = UnivariateMomentTable::from_innovations(&e, top).ok()?;
                let s = covariance::s_smi(&table, self.sys).ok()?.matrix;
                let w = floored_inverse(&s).inverse;
                let v = &w * &g;
                let loss = g.dot(&v);
                let gamma = smi_quadratic_moment_gradient(&table, self.sys, &v);
                // d mu_{i,r} / d b_pq = -r a_ip (1/T) sum_t e_i^{r-1} e_q
                let cross = e.power_cross_moments(top - 1);
                let a = e.unmixing();
                let mut grad = (jac.transpose() * &v * 2.0).as_slice().to_vec();
                for q in 0..n {
                    for p in 0..n {
                        let mut s = 0.0;
                        for i in 0..n {
                            for r in 1..=top {
                                s -= gamma[i][r] * r as f64 * a[(i, p)] * cross[(i * top + r - 1) * n + q];
                            }
                        }
                        grad[q * n + p] -= s;
                    }
                }
                Some((loss, grad))
            }
        }
    }
}

fn scale_factors(e: &Innovations, sys: &MomentSystem) -> Result<DVector<f64>> {
    Ok(scale_diagonal_from_factors(sys, &e.scale_factors()?))
}

/// Column sign flips and reordering applied to an estimate: column `j` of the
/// normalized matrix is `signs[j]` times column `perm[j]` of the original.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedPermutation {
    pub perm: Vec<usize>,
    pub signs: Vec<i8>,
}

impl SignedPermutation {
    pub fn identity(n: usize) -> Self {
        Self { perm: (0..n).collect(), signs: vec![1; n] }
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p) && self.signs.iter().all(|&s| s == 1)
    }

    pub fn apply(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = b.nrows();
        DMatrix::from_fn(n, n, |r, j| self.signs[j] as f64 * b[(r, self.perm[j])])
    }

    /// Transforms a covariance of `vec(B)` to the normalized ordering.
    pub fn apply_covariance(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.perm.len();
        let src = |a: usize| (self.perm[a / n] * n + a % n, self.signs[a / n] as f64);
        DMatrix::from_fn(n * n, n * n, |a, b| {
            let (sa, fa) = src(a);
            let (sb, fb) = src(b);
            fa * fb * v[(sa, sb)]
        })
    }

    /// Reorders the columns of a shock panel (`T x n`) the same way.
    pub fn apply_columns(&self, e: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(e.nrows(), e.ncols(), |t, j| self.signs[j] as f64 * e[(t, self.perm[j])])
    }
}

#[derive(Debug, Clone)]
pub enum SignMode<'a> {
    /// Minimize the Wald statistic of `B P = b_ref` under `avar`.
    Reference { b_ref: &'a MixingMatrix, avar: &'a DMatrix<f64> },
    /// Greedy largest-magnitude diagonal, then positive diagonal.
    Convention,
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Chooses the signed column permutation for `b_hat`.
pub fn sign_permutation(b_hat: &MixingMatrix, mode: &SignMode<'_>) -> Result<SignedPermutation> {
    let b = b_hat.matrix();
    let n = b_hat.n();
    match mode {
        SignMode::Convention => {
            let mut used = vec![false; n];
            let mut perm = Vec::with_capacity(n);
            let mut signs = Vec::with_capacity(n);
            for i in 0..n {
                let j = (0..n)
                    .filter(|&j| !used[j])
                    .max_by(|&x, &y| b[(i, x)].abs().total_cmp(&b[(i, y)].abs()).then(y.cmp(&x)))
                    .expect("unassigned column");
                used[j] = true;
                perm.push(j);
                signs.push(if b[(i, j)] < 0.0 { -1 } else { 1 });
            }
            Ok(SignedPermutation { perm, signs })
        }
        SignMode::Reference { b_ref, avar } => {
            if b_ref.n() != n || avar.nrows() != n * n {
                return Err(Error::DimensionMismatch("reference does not match the estimate".into()));
            }
            let precision = spd_inverse(avar).unwrap_or_else(|_| floored_inverse(avar).inverse);
            let target = b_ref.vec();
            let mut best: Option<(f64, SignedPermutation)> = None;
            let mut diff = vec![0.0; n * n];
            for perm in permutations(n) {
                for mask in 0..(1u32 << n) {
                    let signs: Vec<i8> = (0..n).map(|j| if mask >> j & 1 == 1 { -1 } else { 1 }).collect();
                    for j in 0..n {
                        for r in 0..n {
                            diff[j * n + r] = signs[j] as f64 * b[(r, perm[j])] - target[j * n + r];
                        }
                    }
                    let mut stat = 0.0;
                    for a in 0..n * n {
                        let mut row = 0.0;
                        for c in 0..n * n {
                            row += precision[(a, c)] * diff[c];
                        }
                        stat += diff[a] * row;
                    }
                    if best.as_ref().map_or(true, |(s, _)| stat < *s) {
                        best = Some((stat, SignedPermutation { perm: perm.clone(), signs }));
                    }
                }
            }
            Ok(best.expect("at least one permutation").1)
        }
    }
}

pub fn sign_permute(b_hat: &MixingMatrix, mode: &SignMode<'_>) -> Result<MixingMatrix> {
    let p = sign_permutation(b_hat, mode)?;
    MixingMatrix::new(p.apply(b_hat.matrix()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    GmmStar,
    Gmm2,
    Csue2,
    CsueStar,
    CueSi,
    CueSmi,
    CsueSi,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 7] = [
        Self::GmmStar,
        Self::Gmm2,
        Self::Csue2,
        Self::CsueStar,
        Self::CueSi,
        Self::CueSmi,
        Self::CsueSi,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::GmmStar => "gmm_star",
            Self::Gmm2 => "gmm2",
            Self::Csue2 => "csue2",
            Self::CsueStar => "csue_star",
            Self::CueSi => "cue_si",
            Self::CueSmi => "cue_smi",
            Self::CsueSi => "csue_si",
        }
    }

    /// Needs the population shock distributions.
    pub fn needs_truth(self) -> bool {
        matches!(self, Self::GmmStar | Self::CsueStar)
    }

    /// The inference basis matching the estimator's own weighting.
    pub fn default_basis(self) -> Basis {
        match self {
            Self::Gmm2 | Self::CueSi | Self::CsueSi => Basis::Si,
            _ => Basis::Smi,
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown estimator '{s}'")))
    }
}

#[derive(Debug, Clone)]
pub struct EstimateResult {
    /// Normalized estimate.
    pub b_hat: MixingMatrix,
    /// Minimizer as returned by the optimizer.
    pub b_raw: MixingMatrix,
    pub normalization: SignedPermutation,
    pub loss: f64,
    pub weighting: String,
    /// Weighting matrix in effect at `b_raw`.
    pub w_effective: DMatrix<f64>,
    /// Eigenvalues floored when inverting the base weighting.
    pub floored: usize,
    pub s_hat: CovarianceMatrixS,
    pub g_hat: GradientMatrixG,
    /// Asymptotic covariance of `vec(b_hat)` under `basis`; `None` when `G`
    /// is rank deficient.
    pub avar: Option<DMatrix<f64>>,
    pub basis: Basis,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub restarts: usize,
    pub t: usize,
}

impl EstimateResult {
    /// Asymptotic covariance in the normalized ordering under another basis.
    pub fn avar_for(
        &self,
        basis: Basis,
        u: &ShockPanel,
        sys: &MomentSystem,
        dists: Option<&[ShockDistributionSpec]>,
    ) -> Result<DMatrix<f64>> {
        if basis == self.basis {
            return self.avar.clone().ok_or_else(|| Error::Unidentified("G is rank deficient".into()));
        }
        let (s, g) = inference::basis_matrices(basis, &self.b_raw, u, sys, dists)?;
        let v = inference::asymptotic_covariance(&g.matrix, &s.matrix, &self.w_effective)?;
        Ok(self.normalization.apply_covariance(&v))
    }

    /// Re-normalizes columns; `avar` follows.
    pub fn normalize(&mut self, mode: &SignMode<'_>) -> Result<()> {
        let p = sign_permutation(&self.b_raw, mode)?;
        self.b_hat = MixingMatrix::new(p.apply(self.b_raw.matrix()))?;
        if let Some(v) = &self.avar {
            // undo the current normalization first
            let raw = invert(&self.normalization).apply_covariance(v);
            self.avar = Some(p.apply_covariance(&raw));
        }
        self.normalization = p;
        Ok(())
    }

    pub fn innovation_variances(&self, u: &ShockPanel) -> Result<Vec<f64>> {
        Ok(Innovations::new(&self.b_hat, u)?.variances())
    }
}

fn invert(p: &SignedPermutation) -> SignedPermutation {
    let n = p.perm.len();
    let mut perm = vec![0; n];
    let mut signs = vec![1; n];
    for (j, &src) in p.perm.iter().enumerate() {
        perm[src] = j;
        signs[src] = p.signs[j];
    }
    SignedPermutation { perm, signs }
}

/// Optimizer settings and restart policy.
#[derive(Debug, Clone, Copy)]
pub struct EstimatorOptions {
    pub bfgs: BfgsOptions,
    pub max_restarts: usize,
    pub perturbation: f64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self { bfgs: BfgsOptions::default(), max_restarts: 3, perturbation: 0.05 }
    }
}

/// Result of a bare minimization.
#[derive(Debug, Clone)]
pub struct Minimum {
    pub b: MixingMatrix,
    pub loss: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub restarts: usize,
}

/// Minimizes `objective` from `start` with perturbed restarts on failure.
pub fn minimize_objective(
    u: &ShockPanel,
    sys: &MomentSystem,
    objective: &Objective,
    start: &MixingMatrix,
    opts: &EstimatorOptions,
) -> Result<Minimum> {
    check_dims(u, sys)?;
    if start.n() != sys.n() {
        return Err(Error::DimensionMismatch("start does not match the system".into()));
    }
    let ev = Evaluator::new(u, sys, objective);
    let f = |x: &[f64]| ev.value_and_gradient(x);
    let seed = start.vec().iter().fold(0u64, |h, v| h.rotate_left(5) ^ v.to_bits());
    let mut best: Option<Minimum> = None;
    let mut iterations = 0;
    let mut from = start.vec();
    for attempt in 0..=opts.max_restarts {
        if attempt > 0 {
            let mut r = rng::stream(seed, &[attempt as u64]);
            for v in from.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut r);
                *v *= 1.0 + opts.perturbation * z;
            }
        }
        let Some(out) = bfgs(f, &from, &opts.bfgs) else {
            from = best.as_ref().map_or_else(|| start.vec(), |b| b.b.vec());
            continue;
        };
        iterations += out.iterations;
        let improves = best.as_ref().map_or(true, |b| out.f < b.loss || (out.converged && !b.converged));
        if improves {
            if let Ok(b) = MixingMatrix::new(unvec(&out.x, sys.n())) {
                best = Some(Minimum {
                    b,
                    loss: out.f,
                    converged: out.converged,
                    iterations,
                    gradient_norm: out.grad_norm,
                    restarts: attempt,
                });
            }
        }
        if best.as_ref().is_some_and(|b| b.converged) {
            break;
        }
        from = best.as_ref().map_or_else(|| start.vec(), |b| b.b.vec());
    }
    let mut best = best.ok_or(Error::SingularMatrix { rcond: 0.0 })?;
    best.iterations = iterations;
    Ok(best)
}

/// Loss and effective weighting of `objective` at `b`.
pub fn objective_value(u: &ShockPanel, sys: &MomentSystem, objective: &Objective, b: &MixingMatrix) -> Result<(f64, DMatrix<f64>)> {
    check_dims(u, sys)?;
    let ev = Evaluator::new(u, sys, objective);
    let e = Innovations::new(b, u)?;
    let w = ev.weight(&e)?;
    let loss = ev.loss(&b.vec()).ok_or(Error::SingularMatrix { rcond: 0.0 })?;
    Ok((loss, w))
}

/// Loss and gradient of `objective` at `b`, gradient in `vec(B)` order.
pub fn objective_gradient(u: &ShockPanel, sys: &MomentSystem, objective: &Objective, b: &MixingMatrix) -> Result<(f64, Vec<f64>)> {
    check_dims(u, sys)?;
    Evaluator::new(u, sys, objective)
        .value_and_gradient(&b.vec())
        .ok_or(Error::SingularMatrix { rcond: 0.0 })
}

fn check_dims(u: &ShockPanel, sys: &MomentSystem) -> Result<()> {
    if u.n() != sys.n() {
        return Err(Error::DimensionMismatch(format!(
            "panel has {} columns but the system has n = {}",
            u.n(),
            sys.n()
        )));
    }
    Ok(())
}

/// Lower Cholesky factor of the uncentered second moments of `u`.
pub fn default_start(u: &ShockPanel) -> Result<MixingMatrix> {
    MixingMatrix::new(covariance_cholesky(u.data(), false)?)
}

fn finish(
    u: &ShockPanel,
    sys: &MomentSystem,
    objective: &Objective,
    min: Minimum,
    weighting: String,
    floored: usize,
    basis: Basis,
    dists: Option<&[ShockDistributionSpec]>,
) -> Result<EstimateResult> {
    let (_, w_effective) = objective_value(u, sys, objective, &min.b)?;
    let (s_hat, g_hat) = inference::basis_matrices(basis, &min.b, u, sys, dists)?;
    let avar = inference::asymptotic_covariance(&g_hat.matrix, &s_hat.matrix, &w_effective).ok();
    let mut result = EstimateResult {
        b_hat: min.b.clone(),
        b_raw: min.b,
        normalization: SignedPermutation::identity(sys.n()),
        loss: min.loss,
        weighting,
        w_effective,
        floored,
        s_hat,
        g_hat,
        avar,
        basis,
        converged: min.converged,
        iterations: min.iterations,
        gradient_norm: min.gradient_norm,
        restarts: min.restarts,
        t: u.t(),
    };
    result.normalize(&SignMode::Convention)?;
    Ok(result)
}

/// Minimizes the GMM loss under `weighting`. Inference uses the SMI basis
/// unless the weighting is sample-covariance based.
pub fn minimize_gmm(
    u: &ShockPanel,
    sys: &MomentSystem,
    weighting: &WeightingSpec,
    start: &MixingMatrix,
    opts: &EstimatorOptions,
) -> Result<EstimateResult> {
    check_dims(u, sys)?;
    let (w, floored) = weighting.resolve(u, sys)?;
    let objective = Objective::Fixed { w, scale_updating: weighting.scale_updating };
    let min = minimize_objective(u, sys, &objective, start, opts)?;
    let basis = match weighting.kind {
        WeightingKind::Si(_) => Basis::Si,
        _ => Basis::Smi,
    };
    finish(u, sys, &objective, min, weighting.label(), floored, basis, None)
}

fn two_step(
    u: &ShockPanel,
    sys: &MomentSystem,
    scale_updating: bool,
    second: fn(MixingMatrix) -> WeightingKind,
    opts: &EstimatorOptions,
) -> Result<EstimateResult> {
    let start = default_start(u)?;
    let k = sys.len();
    let first = Objective::Fixed { w: DMatrix::identity(k, k), scale_updating };
    let step1 = minimize_objective(u, sys, &first, &start, opts)?;
    let spec = WeightingSpec { kind: second(step1.b.clone()), scale_updating };
    let (w, floored) = spec.resolve(u, sys)?;
    let basis = match spec.kind {
        WeightingKind::Si(_) => Basis::Si,
        _ => Basis::Smi,
    };
    let objective = Objective::Fixed { w, scale_updating };
    let min = minimize_objective(u, sys, &objective, &step1.b, opts)?;
    finish(u, sys, &objective, min, spec.label(), floored, basis, None)
}

/// Identity weighting, then the inverse sample covariance of the moments.
pub fn two_step_gmm(u: &ShockPanel, sys: &MomentSystem, opts: &EstimatorOptions) -> Result<EstimateResult> {
    two_step(u, sys, false, WeightingKind::Si, opts)
}

/// Scale-updated identity, then scale-updated inverse factorized covariance.
pub fn two_step_csue(u: &ShockPanel, sys: &MomentSystem, opts: &EstimatorOptions) -> Result<EstimateResult> {
    two_step(u, sys, true, WeightingKind::Smi, opts)
}

/// Scale-updated identity, then scale-updated inverse sample covariance.
pub fn csue_si(u: &ShockPanel, sys: &MomentSystem, opts: &EstimatorOptions) -> Result<EstimateResult> {
    two_step(u, sys, true, WeightingKind::Si, opts)
}

fn with_truth(
    u: &ShockPanel,
    sys: &MomentSystem,
    dists: &[ShockDistributionSpec],
    scale_updating: bool,
    opts: &EstimatorOptions,
) -> Result<EstimateResult> {
    if dists.len() != sys.n() {
        return Err(Error::DimensionMismatch("one distribution per shock is required".into()));
    }
    let spec = WeightingSpec { kind: WeightingKind::True(dists.to_vec()), scale_updating };
    minimize_gmm(u, sys, &spec, &default_start(u)?, opts)
}

/// One-step GMM with the inverse population covariance.
pub fn gmm_star(u: &ShockPanel, sys: &MomentSystem, dists: &[ShockDistributionSpec], opts: &EstimatorOptions) -> Result<EstimateResult> {
    with_truth(u, sys, dists, false, opts)
}

/// Scale-updated one-step GMM with the inverse population covariance.
pub fn csue_star(u: &ShockPanel, sys: &MomentSystem, dists: &[ShockDistributionSpec], opts: &EstimatorOptions) -> Result<EstimateResult> {
    with_truth(u, sys, dists, true, opts)
}

/// Continuously updated GMM with `S(B)` re-estimated at every candidate.
pub fn cue(u: &ShockPanel, sys: &MomentSystem, basis: CueBasis, opts: &EstimatorOptions) -> Result<EstimateResult> {
    let start = default_start(u)?;
    let k = sys.len();
    let first = Objective::Fixed { w: DMatrix::identity(k, k), scale_updating: false };
    let step1 = minimize_objective(u, sys, &first, &start, opts)?;
    let objective = Objective::Cue(basis);
    let min = minimize_objective(u, sys, &objective, &step1.b, opts)?;
    let (label, inf_basis) = match basis {
        CueBasis::Si => ("cue-si", Basis::Si),
        CueBasis::Smi => ("cue-smi", Basis::Smi),
    };
    finish(u, sys, &objective, min, label.to_string(), 0, inf_basis, None)
}

/// Runs `kind`; `dists` is required for the estimators using the truth.
pub fn estimate(
    kind: EstimatorKind,
    u: &ShockPanel,
    sys: &MomentSystem,
    dists: Option<&[ShockDistributionSpec]>,
    opts: &EstimatorOptions,
) -> Result<EstimateResult> {
    let truth = || {
        dists.ok_or_else(|| Error::InvalidArgument(format!("{kind} needs the shock distributions")))
    };
    match kind {
        EstimatorKind::GmmStar => gmm_star(u, sys, truth()?, opts),
        EstimatorKind::CsueStar => csue_star(u, sys, truth()?, opts),
        EstimatorKind::Gmm2 => two_step_gmm(u, sys, opts),
        EstimatorKind::Csue2 => two_step_csue(u, sys, opts),
        EstimatorKind::CsueSi => csue_si(u, sys, opts),
        EstimatorKind::CueSi => cue(u, sys, CueBasis::Si, opts),
        EstimatorKind::CueSmi => cue(u, sys, CueBasis::Smi, opts),
    }
}

/// Population asymptotic covariance `(G' S^-1 G)^-1` at the truth.
pub fn true_avar(b0: &MixingMatrix, dists: &[ShockDistributionSpec], sys: &MomentSystem) -> Result<DMatrix<f64>> {
    let s = covariance::s_true(dists, sys)?.matrix;
    let g = covariance::g_true(b0, dists, sys)?.matrix;
    let info = g.transpose() * floored_inverse(&s).inverse * &g;
    let mut v = spd_inverse(&info)?;
    symmetrize(&mut v);
    Ok(v)
}
