use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{print_out, read_toml, write_json, NoiseArgs, OUTPUT_SCHEMA_VERSION};
use crate::covariance::JointMoments;
use crate::error::{Error, Result};
use crate::linalg::floored_inverse;
use crate::mc::ShockSpecs;
use crate::moment_index::enumerate_moment_indices;
use crate::noise::{noise_decomposition, noise_gradient_at_identity, NoiseDecomposition, PopulationOracle};
use crate::svar::MixingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseWeighting {
    /// Inverse population covariance at the truth.
    #[default]
    True,
    Identity,
}

fn default_orders() -> Vec<u32> {
    vec![2, 3, 4]
}

fn default_t() -> usize {
    300
}

fn default_direction() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub n: Option<usize>,
    /// Defaults to the identity.
    pub b0: Option<MixingMatrix>,
    pub shocks: ShockSpecs,
    #[serde(default = "default_orders")]
    pub orders: Vec<u32>,
    #[serde(default = "default_t")]
    pub t: usize,
    #[serde(default)]
    pub weighting: NoiseWeighting,
    /// 1-based shock whose innovation is rescaled.
    #[serde(default = "default_direction")]
    pub direction: usize,
    /// Scale factors applied in `direction`.
    pub grid: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct NoiseRow {
    d: f64,
    #[serde(flatten)]
    terms: NoiseDecomposition,
    /// `trace(W S(B0 D)) / T` computed directly.
    direct: f64,
    /// Central difference of `total` in `d`.
    derivative: f64,
}

#[derive(Debug, Serialize)]
struct NoiseOutput {
    schema_version: u32,
    n: usize,
    t: usize,
    moment_conditions: usize,
    weighting: NoiseWeighting,
    direction: usize,
    /// `-2 sum_k m_kl / T` for each direction `l`.
    gradient_at_identity: Vec<f64>,
    rows: Vec<NoiseRow>,
}

pub fn run(args: &NoiseArgs) -> Result<i32> {
    let cfg: NoiseConfig = read_toml(&args.config)?;
    let n = match (&cfg.b0, cfg.n) {
        (Some(b), Some(k)) if b.n() != k => return Err(Error::InvalidArgument(format!("n = {k} but b0 is {0}x{0}", b.n()))),
        (Some(b), _) => b.n(),
        (None, Some(k)) => k,
        (None, None) => match &cfg.shocks {
            ShockSpecs::PerShock(v) => v.len(),
            ShockSpecs::Common(_) => return Err(Error::InvalidArgument("give n or b0".into())),
        },
    };
    let specs = match &cfg.shocks {
        ShockSpecs::Common(s) => vec![s.clone(); n],
        ShockSpecs::PerShock(v) => v.clone(),
    };
    if specs.len() != n {
        return Err(Error::InvalidArgument(format!("{} shock distributions for n = {n}", specs.len())));
    }
    if cfg.direction == 0 || cfg.direction > n {
        return Err(Error::InvalidArgument(format!("direction must lie in 1..={n}")));
    }
    if cfg.grid.is_empty() || cfg.grid.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::InvalidArgument("grid must hold positive scale factors".into()));
    }
    if cfg.t == 0 {
        return Err(Error::InvalidArgument("t must be >= 1".into()));
    }
    let sys = enumerate_moment_indices(n, &cfg.orders)?;
    if args.dry_run {
        print_out(&serde_json::to_string_pretty(&cfg)?)?;
        return Ok(0);
    }
    let b0 = cfg.b0.clone().unwrap_or_else(|| MixingMatrix::identity(n));
    let oracle = PopulationOracle::new(b0.clone(), JointMoments::from_specs(&specs)?)?;
    let (ef, s0) = oracle.moments(&b0, &sys)?;
    let k = sys.len();
    let w = match cfg.weighting {
        NoiseWeighting::True => floored_inverse(&s0).inverse,
        NoiseWeighting::Identity => DMatrix::identity(k, k),
    };
    let scales = |d: f64| {
        let mut v = vec![1.0; n];
        v[cfg.direction - 1] = d;
        v
    };
    let total = |d: f64| noise_decomposition(&w, &scales(d), &sys, &s0, &ef, cfg.t).map(|x| x.total);
    let mut rows = Vec::with_capacity(cfg.grid.len());
    for &d in &cfg.grid {
        let terms = noise_decomposition(&w, &scales(d), &sys, &s0, &ef, cfg.t)?;
        let bd = MixingMatrix::new(b0.matrix() * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(scales(d))))?;
        let (_, s_bd) = oracle.moments(&bd, &sys)?;
        let direct = (&w * s_bd).trace() / cfg.t as f64;
        let h = 1e-5 * d.max(1.0);
        let derivative = if d > h { (total(d + h)? - total(d - h)?) / (2.0 * h) } else { f64::NAN };
        rows.push(NoiseRow { d, terms, direct, derivative });
    }
    let out = NoiseOutput {
        schema_version: OUTPUT_SCHEMA_VERSION,
        n,
        t: cfg.t,
        moment_conditions: k,
        weighting: cfg.weighting,
        direction: cfg.direction,
        gradient_at_identity: noise_gradient_at_identity(&sys, cfg.t),
        rows,
    };
    write_json(&out, args.out.as_deref(), "noise.json")?;
    Ok(0)
}
