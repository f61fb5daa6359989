//! Standardized shock distributions: samplers and exact population moments.
//!
//! Every distribution is built from its stated parameters and then affinely
//! standardized with its analytic mean and standard deviation, so draws have
//! mean zero and unit variance in population.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::special::{normal_cdf, normal_pdf, normal_quantile};

/// Highest raw moment tracked for any distribution.
pub const MAX_MOMENT_ORDER: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShockDistributionSpec {
    /// Standard normal; Gaussian shocks leave the model unidentified.
    Gaussian,
    /// `z N(mu1, s1^2) + (1 - z) N(mu2, s2^2)` with `z ~ Bernoulli(p)`;
    /// `s1`, `s2` are standard deviations.
    GaussianMixture { p: f64, mu1: f64, s1: f64, mu2: f64, s2: f64 },
    SkewNormal { alpha: f64 },
    StudentT { nu: f64 },
    /// Standard normal truncated to `[lo, hi]`.
    TruncatedNormal { lo: f64, hi: f64 },
    /// Base shock scaled by `regime_scale` with probability `regime_prob`.
    /// Inside a panel the regime is shared by every shock of the period.
    CommonVolatility {
        base: Box<ShockDistributionSpec>,
        regime_prob: f64,
        regime_scale: f64,
    },
}

impl ShockDistributionSpec {
    /// The mixture used throughout the simulation study.
    pub fn benchmark_mixture() -> Self {
        Self::GaussianMixture { p: 0.79, mu1: -0.2, s1: 0.7, mu2: 0.75, s2: 1.5 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        match self {
            Self::Gaussian => Ok(()),
            Self::GaussianMixture { p, mu1, s1, mu2, s2 } => {
                if !(0.0..=1.0).contains(p) {
                    return bad(format!("mixture weight {p} outside [0, 1]"));
                }
                if !(*s1 > 0.0 && *s2 > 0.0) || !mu1.is_finite() || !mu2.is_finite() {
                    return bad("mixture components need finite means and positive sd".into());
                }
                Ok(())
            }
            Self::SkewNormal { alpha } => {
                if alpha.is_finite() {
                    Ok(())
                } else {
                    bad("skew-normal alpha must be finite".into())
                }
            }
            Self::StudentT { nu } => {
                if *nu > 2.0 && nu.is_finite() {
                    Ok(())
                } else {
                    bad(format!("student-t needs nu > 2 for a finite variance, got {nu}"))
                }
            }
            Self::TruncatedNormal { lo, hi } => {
                if lo.is_finite() && hi.is_finite() && lo < hi {
                    Ok(())
                } else {
                    bad(format!("truncation bounds must satisfy lo < hi, got [{lo}, {hi}]"))
                }
            }
            Self::CommonVolatility { base, regime_prob, regime_scale } => {
                if matches!(**base, Self::CommonVolatility { .. }) {
                    return bad("nested common-volatility specs are not supported".into());
                }
                if !(0.0..=1.0).contains(regime_prob) || !(*regime_scale > 0.0) {
                    return bad("regime probability in [0,1] and positive scale required".into());
                }
                base.validate()
            }
        }
    }

    /// Largest order for which the raw moment is finite (`usize::MAX` if all).
    pub fn finite_moment_order(&self) -> usize {
        match self {
            Self::StudentT { nu } => {
                let k = nu.ceil() as usize;
                k.saturating_sub(1)
            }
            Self::CommonVolatility { base, .. } => base.finite_moment_order(),
            _ => usize::MAX,
        }
    }

    /// Raw moments `E[X^r]`, `r = 0..=max_order`, before standardization.
    fn raw_moments_unstandardized(&self, max_order: usize) -> Vec<f64> {
        match self {
            Self::Gaussian => gaussian_raw_moments(0.0, 1.0, max_order),
            Self::GaussianMixture { p, mu1, s1, mu2, s2 } => {
                let a = gaussian_raw_moments(*mu1, *s1, max_order);
                let b = gaussian_raw_moments(*mu2, *s2, max_order);
                a.iter().zip(&b).map(|(x, y)| p * x + (1.0 - p) * y).collect()
            }
            Self::SkewNormal { alpha } => {
                let delta = alpha / (1.0 + alpha * alpha).sqrt();
                let c = (1.0 - delta * delta).sqrt();
                // X = delta |Z0| + c Z1
                let half = half_normal_moments(max_order);
                let normal = gaussian_raw_moments(0.0, 1.0, max_order);
                (0..=max_order)
                    .map(|k| {
                        (0..=k)
                            .map(|j| {
                                binomial(k, j) * delta.powi(j as i32) * half[j]
                                    * c.powi((k - j) as i32)
                                    * normal[k - j]
                            })
                            .sum()
                    })
                    .collect()
            }
            Self::StudentT { nu } => (0..=max_order)
                .map(|r| {
                    if r % 2 == 1 {
                        0.0
                    } else {
                        (1..=r / 2)
                            .map(|i| nu * (2 * i - 1) as f64 / (nu - 2.0 * i as f64))
                            .product()
                    }
                })
                .collect(),
            Self::TruncatedNormal { lo, hi } => truncated_normal_moments(*lo, *hi, max_order),
            Self::CommonVolatility { base, regime_prob, regime_scale } => {
                let inner = base.population_moments_unchecked(max_order);
                (0..=max_order)
                    .map(|r| {
                        inner[r]
                            * (regime_prob * regime_scale.powi(r as i32) + (1.0 - regime_prob))
                    })
                    .collect()
            }
        }
    }

    fn population_moments_unchecked(&self, max_order: usize) -> Vec<f64> {
        let raw = self.raw_moments_unstandardized(max_order.max(2));
        let mean = raw[1];
        let var = raw[2] - mean * mean;
        let sd = var.sqrt();
        // E[((X - mean)/sd)^r] by binomial expansion
        (0..=max_order)
            .map(|r| {
                let central: f64 = (0..=r)
                    .map(|j| binomial(r, j) * raw[j] * (-mean).powi((r - j) as i32))
                    .sum();
                central / sd.powi(r as i32)
            })
            .collect()
    }

    /// Raw moments of the standardized distribution, orders `0..=max_order`.
    pub fn population_moments(&self, max_order: usize) -> Result<Vec<f64>> {
        self.validate()?;
        let finite = self.finite_moment_order();
        if max_order > finite {
            return Err(Error::InvalidArgument(format!(
                "moments up to order {max_order} do not exist (finite up to {finite})"
            )));
        }
        let mut m = self.population_moments_unchecked(max_order);
        // exact by construction
        m[0] = 1.0;
        if max_order >= 1 {
            m[1] = 0.0;
        }
        if max_order >= 2 {
            m[2] = 1.0;
        }
        Ok(m)
    }

    /// Analytic mean and standard deviation before standardization.
    fn location_scale(&self) -> (f64, f64) {
        let raw = self.raw_moments_unstandardized(2);
        (raw[1], (raw[2] - raw[1] * raw[1]).sqrt())
    }

    pub fn sampler(&self) -> Result<Sampler> {
        self.validate()?;
        let (mean, sd) = self.location_scale();
        let kind = match self {
            Self::Gaussian => SamplerKind::Gaussian,
            Self::GaussianMixture { p, mu1, s1, mu2, s2 } => {
                SamplerKind::Mixture { p: *p, mu1: *mu1, s1: *s1, mu2: *mu2, s2: *s2 }
            }
            Self::SkewNormal { alpha } => {
                let delta = alpha / (1.0 + alpha * alpha).sqrt();
                SamplerKind::SkewNormal { delta, c: (1.0 - delta * delta).sqrt() }
            }
            Self::StudentT { nu } => SamplerKind::StudentT(
                StudentT::new(*nu).map_err(|e| Error::InvalidArgument(e.to_string()))?,
            ),
            Self::TruncatedNormal { lo, hi } => {
                // sample on the side with better tail resolution
                let flip = *lo > 0.0;
                let (a, b) = if flip { (-hi, -lo) } else { (*lo, *hi) };
                SamplerKind::Truncated { plo: normal_cdf(a), phi: normal_cdf(b), a, b, flip }
            }
            Self::CommonVolatility { base, regime_prob, regime_scale } => {
                SamplerKind::CommonVolatility {
                    base: Box::new(base.sampler()?),
                    prob: *regime_prob,
                    scale: *regime_scale,
                }
            }
        };
        Ok(Sampler { kind, mean, sd })
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Raw moments of `N(mu, s^2)` via `M_k = mu M_{k-1} + (k-1) s^2 M_{k-2}`.
pub fn gaussian_raw_moments(mu: f64, s: f64, max_order: usize) -> Vec<f64> {
    let mut m = vec![0.0; max_order + 1];
    m[0] = 1.0;
    if max_order >= 1 {
        m[1] = mu;
    }
    for k in 2..=max_order {
        m[k] = mu * m[k - 1] + (k - 1) as f64 * s * s * m[k - 2];
    }
    m
}

/// `E|Z|^j` for standard normal `Z`.
fn half_normal_moments(max_order: usize) -> Vec<f64> {
    let mut m = vec![0.0; max_order + 1];
    m[0] = 1.0;
    if max_order >= 1 {
        m[1] = (2.0 / std::f64::consts::PI).sqrt();
    }
    for j in 2..=max_order {
        m[j] = (j - 1) as f64 * m[j - 2];
    }
    m
}

/// Raw moments of a standard normal truncated to `[lo, hi]`.
fn truncated_normal_moments(lo: f64, hi: f64, max_order: usize) -> Vec<f64> {
    let z = normal_cdf(hi) - normal_cdf(lo);
    let (pl, ph) = (normal_pdf(lo), normal_pdf(hi));
    let mut m = vec![0.0; max_order + 1];
    m[0] = 1.0;
    if max_order >= 1 {
        m[1] = (pl - ph) / z;
    }
    for k in 2..=max_order {
        let km1 = (k - 1) as i32;
        m[k] = (k - 1) as f64 * m[k - 2] + (lo.powi(km1) * pl - hi.powi(km1) * ph) / z;
    }
    m
}

#[derive(Debug, Clone)]
enum SamplerKind {
    Gaussian,
    Mixture { p: f64, mu1: f64, s1: f64, mu2: f64, s2: f64 },
    SkewNormal { delta: f64, c: f64 },
    StudentT(StudentT<f64>),
    Truncated { plo: f64, phi: f64, a: f64, b: f64, flip: bool },
    CommonVolatility { base: Box<Sampler>, prob: f64, scale: f64 },
}

/// Draws standardized variates of one distribution.
#[derive(Debug, Clone)]
pub struct Sampler {
    kind: SamplerKind,
    mean: f64,
    sd: f64,
}

impl Sampler {
    fn raw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.kind {
            SamplerKind::Gaussian => rng.sample(StandardNormal),
            SamplerKind::Mixture { p, mu1, s1, mu2, s2 } => {
                let first = rng.gen::<f64>() < *p;
                let z: f64 = rng.sample(StandardNormal);
                if first {
                    mu1 + s1 * z
                } else {
                    mu2 + s2 * z
                }
            }
            SamplerKind::SkewNormal { delta, c } => {
                let z0: f64 = rng.sample(StandardNormal);
                let z1: f64 = rng.sample(StandardNormal);
                delta * z0.abs() + c * z1
            }
            SamplerKind::StudentT(t) => t.sample(rng),
            SamplerKind::Truncated { plo, phi, a, b, flip } => {
                let u: f64 = rng.gen();
                let x = normal_quantile(plo + u * (phi - plo)).clamp(*a, *b);
                if *flip {
                    -x
                } else {
                    x
                }
            }
            SamplerKind::CommonVolatility { base, prob, scale } => {
                let high = rng.gen::<f64>() < *prob;
                let x = base.draw(rng);
                if high {
                    scale * x
                } else {
                    x
                }
            }
        }
    }

    /// One standardized draw.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        (self.raw(rng) - self.mean) / self.sd
    }

    /// Standardized base draw ignoring any volatility regime.
    pub(crate) fn draw_base<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.kind {
            SamplerKind::CommonVolatility { base, .. } => base.draw(rng),
            _ => self.draw(rng),
        }
    }

    pub fn fill<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        for v in out {
            *v = self.draw(rng);
        }
    }
}

/// `T` iid standardized draws from `spec`, reproducible for a given seed.
pub fn sample(spec: &ShockDistributionSpec, t: usize, seed: u64) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::InvalidArgument("sample size must be >= 1".into()));
    }
    let sampler = spec.sampler()?;
    let mut rng = rng::stream(seed, &[]);
    let mut out = vec![0.0; t];
    sampler.fill(&mut rng, &mut out);
    Ok(out)
}

pub fn population_moments(spec: &ShockDistributionSpec, max_order: usize) -> Result<Vec<f64>> {
    spec.population_moments(max_order)
}

/// Shocks sharing one two-regime volatility process: each period a single
/// Bernoulli(`regime_prob`) draw scales every shock by `regime_scale`, and
/// columns are rescaled by `sqrt(p s^2 + 1 - p)` to unit variance.
pub fn common_volatility_panel(
    base_specs: &[ShockDistributionSpec],
    regime_prob: f64,
    regime_scale: f64,
    t: usize,
    seed: u64,
) -> Result<nalgebra::DMatrix<f64>> {
    if base_specs.is_empty() || t == 0 {
        return Err(Error::InvalidArgument("need at least one shock and T >= 1".into()));
    }
    if !(0.0..=1.0).contains(&regime_prob) || !(regime_scale > 0.0) {
        return Err(Error::InvalidArgument("invalid volatility regime parameters".into()));
    }
    let samplers = base_specs
        .iter()
        .map(|s| s.sampler())
        .collect::<Result<Vec<_>>>()?;
    let norm = (regime_prob * regime_scale * regime_scale + 1.0 - regime_prob).sqrt();
    let mut regime_rng = rng::stream(seed, &[u64::MAX]);
    let regimes: Vec<f64> = (0..t)
        .map(|_| if regime_rng.gen::<f64>() < regime_prob { regime_scale } else { 1.0 })
        .collect();
    let mut out = nalgebra::DMatrix::zeros(t, base_specs.len());
    for (i, s) in samplers.iter().enumerate() {
        let mut r = rng::stream(seed, &[i as u64]);
        for row in 0..t {
            out[(row, i)] = regimes[row] * s.draw_base(&mut r) / norm;
        }
    }
    Ok(out)
}
