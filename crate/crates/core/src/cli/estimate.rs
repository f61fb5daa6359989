use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{print_out, read_matrix_csv, read_toml, write_json, EstimateArgs, InferenceArg, OnOff, WeightingArg, OUTPUT_SCHEMA_VERSION};
use crate::dgp::ShockDistributionSpec;
use crate::error::{Error, Result};
use crate::estimators::{
    estimate, minimize_gmm, minimize_objective, default_start, EstimateResult, EstimatorKind, EstimatorOptions,
    Objective, WeightingKind, WeightingSpec,
};
use crate::inference::{self, Basis};
use crate::mc::{ShockSpecs, TestSpec};
use crate::moment_index::{enumerate_moment_indices, MomentSystem};
use crate::svar::{Innovations, MixingMatrix, ShockPanel};
use crate::var_model::ols_var;

fn default_orders() -> Vec<u32> {
    vec![2, 3, 4]
}

fn default_level() -> f64 {
    0.9
}

/// Settings file for `estimate`; command-line flags override it.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub estimator: Option<EstimatorKind>,
    pub weighting: Option<String>,
    pub scale_updating: Option<bool>,
    pub inference: Option<Basis>,
    pub lags: Option<usize>,
    /// Include an intercept in the VAR (default true).
    pub intercept: Option<bool>,
    #[serde(default = "default_orders")]
    pub orders: Vec<u32>,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Shock distributions, needed by `gmm_star`, `csue_star` and `--weighting true`.
    pub shocks: Option<ShockSpecs>,
    /// Hypothesized impact matrix for `full` tests.
    pub b0: Option<MixingMatrix>,
    #[serde(default)]
    pub tests: Vec<TestSpec>,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

#[derive(Debug, Serialize)]
struct TestOutput {
    name: String,
    statistic: f64,
    dof: usize,
    p_value: f64,
    floored: bool,
}

#[derive(Debug, Serialize)]
struct EstimateOutput {
    schema_version: u32,
    estimator: String,
    weighting: String,
    scale_updating: bool,
    t: usize,
    n: usize,
    moment_conditions: usize,
    lags: Option<usize>,
    var_lags: Option<Vec<Vec<Vec<f64>>>>,
    /// Normalized by convention: largest entry of each row on the diagonal, positive.
    b_hat: Vec<Vec<f64>>,
    b_raw: Vec<Vec<f64>>,
    column_permutation: Vec<usize>,
    column_signs: Vec<i8>,
    loss: f64,
    converged: bool,
    iterations: usize,
    gradient_norm: f64,
    restarts: usize,
    floored_eigenvalues: usize,
    s_provenance: String,
    g_provenance: String,
    inference: Basis,
    /// Asymptotic covariance of `vec(B_hat)` (column-major), row-major nested.
    avar: Option<Vec<Vec<f64>>>,
    std_errors: Option<Vec<Vec<f64>>>,
    level: f64,
    /// `[lower, upper]` per entry of `B_hat`.
    confidence_intervals: Option<Vec<Vec<[f64; 2]>>>,
    tests: Vec<TestOutput>,
    innovation_variances: Vec<f64>,
    warnings: Vec<String>,
}

fn weighting_name(w: WeightingArg) -> &'static str {
    match w {
        WeightingArg::Si => "si",
        WeightingArg::Smi => "smi",
        WeightingArg::True => "true",
        WeightingArg::Identity => "identity",
    }
}

fn parse_weighting(s: &str) -> Result<WeightingArg> {
    match s {
        "si" => Ok(WeightingArg::Si),
        "smi" => Ok(WeightingArg::Smi),
        "true" => Ok(WeightingArg::True),
        "identity" => Ok(WeightingArg::Identity),
        other => Err(Error::InvalidArgument(format!("unknown weighting '{other}'"))),
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Identity first step, then the requested weighting at the first-step estimate.
fn custom_two_step(
    u: &ShockPanel,
    sys: &MomentSystem,
    weighting: WeightingArg,
    scale_updating: bool,
    dists: Option<&[ShockDistributionSpec]>,
    opts: &EstimatorOptions,
) -> Result<EstimateResult> {
    let k = sys.len();
    let first = Objective::Fixed { w: DMatrix::identity(k, k), scale_updating };
    let step1 = minimize_objective(u, sys, &first, &default_start(u)?, opts)?;
    let kind = match weighting {
        WeightingArg::Identity => WeightingKind::Identity,
        WeightingArg::Si => WeightingKind::Si(step1.b.clone()),
        WeightingArg::Smi => WeightingKind::Smi(step1.b.clone()),
        WeightingArg::True => WeightingKind::True(
            dists
                .ok_or_else(|| Error::InvalidArgument("--weighting true needs `shocks` in the config".into()))?
                .to_vec(),
        ),
    };
    minimize_gmm(u, sys, &WeightingSpec { kind, scale_updating }, &step1.b, opts)
}

pub fn run(args: &EstimateArgs) -> Result<i32> {
    let cfg: EstimateConfig = match &args.config {
        Some(p) => read_toml(p)?,
        None => EstimateConfig::default(),
    };
    let orders = if cfg.orders.is_empty() { default_orders() } else { cfg.orders.clone() };
    let (_, y) = read_matrix_csv(&args.data)?;
    let n = y.ncols();
    let lags = args.lags.or(cfg.lags);
    let intercept = cfg.intercept.unwrap_or(true);
    let weighting = match (args.weighting, &cfg.weighting) {
        (Some(w), _) => Some(w),
        (None, Some(s)) => Some(parse_weighting(s)?),
        (None, None) => None,
    };
    let scale_updating = args.scale_updating.map(|s| s == OnOff::On).or(cfg.scale_updating);
    let estimator = match &args.estimator {
        Some(s) => Some(s.parse::<EstimatorKind>()?),
        None => cfg.estimator,
    };
    let kind = estimator.unwrap_or(EstimatorKind::Csue2);
    let dists: Option<Vec<ShockDistributionSpec>> = cfg.shocks.as_ref().map(|s| match s {
        ShockSpecs::Common(d) => vec![d.clone(); n],
        ShockSpecs::PerShock(v) => v.clone(),
    });
    if let Some(d) = &dists {
        if d.len() != n {
            return Err(Error::InvalidArgument(format!("{} shock distributions for {n} variables", d.len())));
        }
        for s in d {
            s.validate()?;
        }
    }
    if let Some(b0) = &cfg.b0 {
        if b0.n() != n {
            return Err(Error::InvalidArgument(format!("b0 is {0}x{0} but the data have {n} columns", b0.n())));
        }
    }
    for t in &cfg.tests {
        match t {
            TestSpec::Full { .. } if cfg.b0.is_none() => {
                return Err(Error::InvalidArgument(format!("test '{}' needs b0 in the config", t.name())))
            }
            TestSpec::Entry { row, col, .. } if *row == 0 || *col == 0 || *row > n || *col > n => {
                return Err(Error::InvalidArgument(format!("test '{}' refers to a missing entry", t.name())))
            }
            _ => {}
        }
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::InvalidArgument("level must lie in (0, 1)".into()));
    }
    let sys = enumerate_moment_indices(n, &orders)?;
    let custom = weighting.is_some() || scale_updating.is_some();

    if args.dry_run {
        let plan = serde_json::json!({
            "schema_version": OUTPUT_SCHEMA_VERSION,
            "data": args.data,
            "t": y.nrows(),
            "n": n,
            "lags": lags,
            "estimator": if custom { "custom".to_string() } else { kind.as_str().to_string() },
            "weighting": weighting.map(weighting_name),
            "scale_updating": scale_updating,
            "inference": args.inference.map(|b| format!("{b:?}").to_lowercase()).or(cfg.inference.map(|b| b.as_str().to_string())),
            "moment_conditions": sys.len(),
            "tests": cfg.tests.iter().map(|t| t.name()).collect::<Vec<_>>(),
            "out": args.out,
        });
        print_out(&serde_json::to_string_pretty(&plan)?)?;
        return Ok(0);
    }

    let (u, var_lags) = match lags {
        Some(p) => {
            let fit = ols_var(&y, p, intercept)?;
            let l = fit.lags.iter().map(rows).collect::<Vec<_>>();
            (fit.residuals, Some(l))
        }
        None => (ShockPanel::new(y)?, None),
    };
    let opts = EstimatorOptions::default();
    let res = if custom {
        custom_two_step(
            &u,
            &sys,
            weighting.unwrap_or(WeightingArg::Smi),
            scale_updating.unwrap_or(false),
            dists.as_deref(),
            &opts,
        )?
    } else {
        estimate(kind, &u, &sys, dists.as_deref(), &opts)?
    };

    let basis = match args.inference {
        Some(InferenceArg::Smi) => Basis::Smi,
        Some(InferenceArg::Si) => Basis::Si,
        None => cfg.inference.unwrap_or(res.basis),
    };
    let mut warnings = Vec::new();
    let avar = match res.avar_for(basis, &u, &sys, dists.as_deref()) {
        Ok(v) => Some(v),
        Err(e) => {
            warnings.push(format!("asymptotic covariance unavailable: {e}"));
            None
        }
    };
    let (s_prov, g_prov) = if basis == res.basis {
        (res.s_hat.provenance, res.g_hat.provenance)
    } else {
        let (s, g) = inference::basis_matrices(basis, &res.b_raw, &u, &sys, dists.as_deref())?;
        (s.provenance, g.provenance)
    };
    if res.floored > 0 {
        warnings.push(format!("{} eigenvalues of the weighting covariance were floored", res.floored));
    }
    if !res.converged {
        warnings.push(format!(
            "optimizer did not converge after {} iterations (gradient norm {:e})",
            res.iterations, res.gradient_norm
        ));
    }
    let tt = u.t();
    let beta = DVector::from_vec(res.b_hat.vec());
    let (std_errors, cis) = match &avar {
        Some(v) => {
            let se = DMatrix::from_fn(n, n, |r, c| (v[(c * n + r, c * n + r)].max(0.0) / tt as f64).sqrt());
            let ci = (0..n)
                .map(|r| {
                    (0..n)
                        .map(|c| inference::confidence_interval(c * n + r, v, &beta, tt, cfg.level).map(|(a, b)| [a, b]))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            (Some(rows(&se)), Some(ci))
        }
        None => (None, None),
    };
    let mut tests = Vec::new();
    if let Some(v) = &avar {
        for t in &cfg.tests {
            let (rm, rv) = match t {
                TestSpec::Full { .. } => inference::full_restriction(cfg.b0.as_ref().expect("checked above")),
                TestSpec::Recursive { .. } => inference::recursive_restriction(n),
                TestSpec::Entry { row, col, value, .. } => inference::entry_restriction(n, row - 1, col - 1, *value),
            };
            let w = inference::wald(&rm, &rv, &beta, v, tt)?;
            tests.push(TestOutput {
                name: t.name().to_string(),
                statistic: w.statistic,
                dof: w.dof,
                p_value: w.p_value,
                floored: w.floored,
            });
        }
    }
    let innovations = Innovations::new(&res.b_hat, &u)?;
    let out = EstimateOutput {
        schema_version: OUTPUT_SCHEMA_VERSION,
        estimator: if custom { "custom".into() } else { kind.as_str().into() },
        weighting: res.weighting.clone(),
        scale_updating: res.weighting.ends_with("+scale"),
        t: tt,
        n,
        moment_conditions: sys.len(),
        lags,
        var_lags,
        b_hat: res.b_hat.to_rows(),
        b_raw: res.b_raw.to_rows(),
        column_permutation: res.normalization.perm.clone(),
        column_signs: res.normalization.signs.clone(),
        loss: res.loss,
        converged: res.converged,
        iterations: res.iterations,
        gradient_norm: res.gradient_norm,
        restarts: res.restarts,
        floored_eigenvalues: res.floored,
        s_provenance: format!("{s_prov:?}").to_uppercase(),
        g_provenance: format!("{g_prov:?}").to_uppercase(),
        inference: basis,
        avar: avar.as_ref().map(rows),
        std_errors,
        level: cfg.level,
        confidence_intervals: cis,
        tests,
        innovation_variances: innovations.variances(),
        warnings,
    };
    write_json(&out, Some(&args.out), "estimate.json")?;
    write_innovations(&args.out.join("innovations.csv"), &innovations.to_matrix())?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    if !res.converged {
        eprintln!("error: estimation did not converge; diagnostics in {}", args.out.join("estimate.json").display());
        return Ok(3);
    }
    Ok(0)
}

fn write_innovations(path: &Path, e: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((1..=e.ncols()).map(|i| format!("e{i}")))?;
    for r in e.row_iter() {
        w.write_record(r.iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}
