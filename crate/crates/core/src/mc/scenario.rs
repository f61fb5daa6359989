use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dgp::ShockDistributionSpec;
use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::inference::Basis;
use crate::moment_index::{enumerate_moment_indices, MomentSystem};
use crate::svar::MixingMatrix;

/// One spec shared by every shock, or one per shock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ShockSpecs {
    Common(ShockDistributionSpec),
    PerShock(Vec<ShockDistributionSpec>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestSpec {
    /// `B = B0`.
    Full { name: String },
    /// Zero strict upper triangle.
    Recursive { name: String },
    /// `B[row, col] = value`, 1-based.
    Entry { name: String, row: usize, col: usize, value: f64 },
}

impl TestSpec {
    pub fn name(&self) -> &str {
        match self {
            Self::Full { name } | Self::Recursive { name } | Self::Entry { name, .. } => name,
        }
    }
}

/// Single-coefficient Wald tests over a grid of hypothesized values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerCurveSpec {
    pub row: usize,
    pub col: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarScenario {
    /// Lag matrices `A_1..A_P`, each row-major.
    pub lags: Vec<Vec<Vec<f64>>>,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default)]
    pub intercept: bool,
}

fn default_burn_in() -> usize {
    200
}

fn default_bases() -> Vec<Basis> {
    vec![Basis::Smi, Basis::Si]
}

fn default_orders() -> Vec<u32> {
    vec![2, 3, 4]
}

fn default_level() -> f64 {
    0.9
}

fn default_alpha() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Optional; must equal the dimension of `b0` when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    pub b0: MixingMatrix,
    pub shocks: ShockSpecs,
    pub sample_sizes: Vec<usize>,
    pub replications: usize,
    pub estimators: Vec<EstimatorKind>,
    #[serde(default = "default_bases")]
    pub inference: Vec<Basis>,
    #[serde(default)]
    pub tests: Vec<TestSpec>,
    /// 1-based `[row, col]` pairs for coverage and coefficient summaries.
    #[serde(default)]
    pub coefficients: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_curve: Option<PowerCurveSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub var: Option<VarScenario>,
    #[serde(default = "default_orders")]
    pub orders: Vec<u32>,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let sc: Self = toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("scenario: {e}")))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let sc: Self = serde_json::from_str(text)?;
        sc.validate()?;
        Ok(sc)
    }

    /// Parses TOML or JSON depending on the extension (JSON if it starts with `{`
    /// when there is none).
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::at_path(path))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text),
            Some("toml") => Self::from_toml(&text),
            _ if text.trim_start().starts_with('{') => Self::from_json(&text),
            _ => Self::from_toml(&text),
        }
    }

    pub fn dim(&self) -> usize {
        self.b0.n()
    }

    pub fn shock_specs(&self) -> Vec<ShockDistributionSpec> {
        match &self.shocks {
            ShockSpecs::Common(s) => vec![s.clone(); self.dim()],
            ShockSpecs::PerShock(v) => v.clone(),
        }
    }

    pub fn system(&self) -> Result<MomentSystem> {
        enumerate_moment_indices(self.dim(), &self.orders)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let n = self.dim();
        if let Some(k) = self.n {
            if k != n {
                return bad(format!("n = {k} but b0 is {n}x{n}"));
            }
        }
        if self.replications == 0 {
            return bad("replications must be >= 1".into());
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.iter().any(|&t| t < 2) {
            return bad("sample_sizes must be non-empty and every T >= 2".into());
        }
        if self.estimators.is_empty() {
            return bad("at least one estimator is required".into());
        }
        if self.inference.is_empty() {
            return bad("at least one inference basis is required".into());
        }
        if !(self.level > 0.0 && self.level < 1.0) || !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("level and alpha must lie in (0, 1)".into());
        }
        let specs = self.shock_specs();
        if specs.len() != n {
            return bad(format!("{} shock specs for n = {n}", specs.len()));
        }
        for s in &specs {
            s.validate()?;
        }
        super::run::shared_regime(&specs)?;
        let joint = crate::covariance::JointMoments::from_specs(&specs);
        if self.estimators.iter().any(|e| e.needs_truth()) || self.inference.contains(&Basis::True) {
            joint?;
        }
        let check_entry = |r: usize, c: usize| {
            if r == 0 || c == 0 || r > n || c > n {
                Err(Error::InvalidArgument(format!("coefficient ({r}, {c}) outside 1..={n}")))
            } else {
                Ok(())
            }
        };
        for [r, c] in &self.coefficients {
            check_entry(*r, *c)?;
        }
        let mut names = std::collections::BTreeSet::new();
        for t in &self.tests {
            if let TestSpec::Entry { row, col, .. } = t {
                check_entry(*row, *col)?;
            }
            if t.name().is_empty() || !t.name().chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_') {
                return bad(format!("test name '{}' must be non-empty [A-Za-z0-9_]", t.name()));
            }
            if !names.insert(t.name().to_string()) {
                return bad(format!("duplicate test name '{}'", t.name()));
            }
        }
        if let Some(pc) = &self.power_curve {
            check_entry(pc.row, pc.col)?;
            if pc.values.is_empty() {
                return bad("power curve needs at least one value".into());
            }
        }
        if let Some(v) = &self.var {
            let spec = crate::var_model::VarSpec { lags: v.lags.clone(), b0: self.b0.clone() };
            let rho = spec.spectral_radius()?;
            if !(rho < 1.0) {
                return bad(format!("VAR is not stationary (spectral radius {rho:.4})"));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        if !self.estimators.iter().all(|e| seen.insert(*e)) {
            return bad("duplicate estimator".into());
        }
        self.system()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("scenario serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Names of the per-record boolean columns, in file order.
    pub fn flag_columns(&self) -> Vec<String> {
        let mut out = Vec::new();
        for [r, c] in &self.coefficients {
            for b in &self.inference {
                out.push(format!("cover_{}_{}", coef_name(*r, *c, self.dim()), b.as_str()));
            }
        }
        for t in &self.tests {
            for b in &self.inference {
                out.push(format!("reject_{}_{}", t.name(), b.as_str()));
            }
        }
        if let Some(pc) = &self.power_curve {
            for v in &pc.values {
                for b in &self.inference {
                    out.push(format!("power_{}_{}_{}", coef_name(pc.row, pc.col, self.dim()), v, b.as_str()));
                }
            }
        }
        out
    }
}

/// Column name of a 1-based coefficient, e.g. `b41`.
pub fn coef_name(row: usize, col: usize, n: usize) -> String {
    if n <= 9 {
        format!("b{row}{col}")
    } else {
        format!("b{row}x{col}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
name = "small"
b0 = [[10.0, 0.0], [5.0, 10.0]]
shocks = { kind = "gaussian_mixture", p = 0.79, mu1 = -0.2, s1 = 0.7, mu2 = 0.75, s2 = 1.5 }
sample_sizes = [100]
replications = 2
estimators = ["gmm_star", "csue2"]
coefficients = [[2, 1]]
seed = 7

[[tests]]
kind = "full"
name = "full"

[[tests]]
kind = "entry"
name = "b12_zero"
row = 1
col = 2
value = 0.0

[power_curve]
row = 2
col = 1
values = [4.0, 5.0]
"#;

    #[test]
    fn parses_and_names_columns() {
        let sc = Scenario::from_toml(SMALL).unwrap();
        assert_eq!(sc.dim(), 2);
        assert_eq!(sc.inference, vec![Basis::Smi, Basis::Si]);
        assert_eq!(
            sc.flag_columns(),
            vec![
                "cover_b21_smi", "cover_b21_si", "reject_full_smi", "reject_full_si",
                "reject_b12_zero_smi", "reject_b12_zero_si", "power_b21_4_smi", "power_b21_4_si",
                "power_b21_5_smi", "power_b21_5_si",
            ]
        );
        let json = serde_json::to_string(&sc).unwrap();
        assert_eq!(Scenario::from_json(&json).unwrap(), sc);
        assert_eq!(sc.hash(), Scenario::from_json(&json).unwrap().hash());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(Scenario::from_toml(&format!("{SMALL}\nbogus = 1\n")).is_err());
        let bad_t = SMALL.replace("sample_sizes = [100]", "sample_sizes = []");
        assert!(Scenario::from_toml(&bad_t).is_err());
        let bad_coef = SMALL.replace("coefficients = [[2, 1]]", "coefficients = [[3, 1]]");
        assert!(Scenario::from_toml(&bad_coef).is_err());
        let t8 = SMALL.replace(
            "shocks = { kind = \"gaussian_mixture\", p = 0.79, mu1 = -0.2, s1 = 0.7, mu2 = 0.75, s2 = 1.5 }",
            "shocks = { kind = \"student_t\", nu = 6.0 }",
        );
        assert!(Scenario::from_toml(&t8).is_err());
    }
}
