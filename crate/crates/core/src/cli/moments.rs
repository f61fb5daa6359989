use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{print_out, read_toml, write_json, MomentsArgs, OUTPUT_SCHEMA_VERSION};
use crate::dgp::{ShockDistributionSpec, MAX_MOMENT_ORDER};
use crate::error::Result;
use crate::mc::record_hash;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentTable {
    pub schema_version: u32,
    pub spec: ShockDistributionSpec,
    /// Raw moments `E[e^r]` for `r = 0..=max_order` of the standardized shock.
    pub moments: Vec<f64>,
    pub max_order: usize,
    pub skewness: Option<f64>,
    pub excess_kurtosis: Option<f64>,
}

pub fn moment_table(spec: &ShockDistributionSpec) -> Result<MomentTable> {
    spec.validate()?;
    let max_order = spec.finite_moment_order().min(MAX_MOMENT_ORDER);
    let moments = spec.population_moments(max_order)?;
    Ok(MomentTable {
        schema_version: OUTPUT_SCHEMA_VERSION,
        spec: spec.clone(),
        skewness: moments.get(3).copied(),
        excess_kurtosis: moments.get(4).map(|m| m - 3.0),
        moments,
        max_order,
    })
}

fn cache_path(spec: &ShockDistributionSpec) -> Option<PathBuf> {
    let dir = std::env::var_os("HOMENT_CACHE_DIR")?;
    let key = serde_json::to_string(spec).ok()?;
    Some(PathBuf::from(dir).join(format!("moments-v{OUTPUT_SCHEMA_VERSION}-{}.json", &record_hash(key.as_bytes())[..16])))
}

/// Moment table, read from or stored in `HOMENT_CACHE_DIR` when it is set.
pub fn cached_moment_table(spec: &ShockDistributionSpec) -> Result<MomentTable> {
    let path = cache_path(spec);
    if let Some(p) = &path {
        if let Ok(text) = std::fs::read_to_string(p) {
            match serde_json::from_str::<MomentTable>(&text) {
                Ok(t) if &t.spec == spec => return Ok(t),
                _ => log::warn!("ignoring stale cache entry {}", p.display()),
            }
        }
    }
    let table = moment_table(spec)?;
    if let Some(p) = &path {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(p, serde_json::to_string_pretty(&table)?)?;
    }
    Ok(table)
}

pub fn run(args: &MomentsArgs) -> Result<i32> {
    let spec: ShockDistributionSpec = match (&args.spec, &args.config) {
        (Some(s), _) => serde_json::from_str(s)?,
        (None, Some(p)) => read_toml(p)?,
        (None, None) => unreachable!("clap requires one of --spec and --config"),
    };
    spec.validate()?;
    if args.dry_run {
        print_out(&serde_json::to_string_pretty(&spec)?)?;
        return Ok(0);
    }
    let table = cached_moment_table(&spec)?;
    write_json(&table, args.out.as_deref(), "moments.json")?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_table() {
        let t = moment_table(&ShockDistributionSpec::benchmark_mixture()).unwrap();
        assert_eq!(t.max_order, 8);
        assert_eq!(&t.moments[..3], &[1.0, 0.0, 1.0]);
        let t = moment_table(&ShockDistributionSpec::StudentT { nu: 7.0 }).unwrap();
        assert_eq!(t.max_order, 6);
    }
}
