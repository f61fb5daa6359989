use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::record::{read_records, sha256_hex, write_records, RecordSet, ReplicationRecord, RECORDS_SCHEMA_VERSION};
use super::scenario::{Scenario, TestSpec};
use super::summary::{summarize, SummaryKind, SummaryTable};
use crate::dgp::{common_volatility_panel, ShockDistributionSpec};
use crate::error::{Error, Result};
use crate::estimators::{estimate, true_avar, EstimatorKind, EstimatorOptions, SignMode};
use crate::inference::{self, Basis};
use crate::moment_index::MomentSystem;
use crate::rng;
use crate::svar::ShockPanel;
use crate::var_model::{ols_var, simulate_var, VarSpec};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses every available core.
    pub threads: Option<usize>,
    /// Where `records.csv`, `manifest.json`, `timings.csv` and the summaries go.
    /// Without it the run stays in memory and cannot resume.
    pub out_dir: Option<PathBuf>,
    pub estimator: EstimatorOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub t: usize,
    pub rep: usize,
    pub estimator: EstimatorKind,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub homent_version: String,
    pub scenario: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub replications: usize,
    pub sample_sizes: Vec<usize>,
    pub estimators: Vec<EstimatorKind>,
    pub records: usize,
    pub failures: usize,
    pub nonconverged: usize,
    pub records_sha256: String,
    pub warnings: Vec<String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: RecordSet,
    pub summaries: Vec<SummaryTable>,
    pub manifest: Manifest,
    /// Wall times of the replications computed in this invocation.
    pub timings: Vec<Timing>,
}

struct Context<'a> {
    sc: &'a Scenario,
    sys: MomentSystem,
    dists: Vec<ShockDistributionSpec>,
    /// Reference covariance for the sign/permutation normalization.
    reference_avar: DMatrix<f64>,
    truth_avar: Option<DMatrix<f64>>,
    restrictions: Vec<(DMatrix<f64>, DVector<f64>)>,
    n_flags: usize,
    opts: EstimatorOptions,
}

/// Reduced-form shocks of replication `rep` at the `t_idx`-th sample size.
pub fn simulate_panel(sc: &Scenario, t_idx: usize, rep: usize) -> Result<ShockPanel> {
    let n = sc.dim();
    let t = *sc
        .sample_sizes
        .get(t_idx)
        .ok_or_else(|| Error::InvalidArgument(format!("sample size index {t_idx} out of range")))?;
    let extra = sc.var.as_ref().map_or(0, |v| v.burn_in + v.lags.len());
    let rows = t + extra;
    let specs = sc.shock_specs();
    let path = [t_idx as u64, rep as u64];
    let eps = match shared_regime(&specs)? {
        Some((bases, prob, scale)) => common_volatility_panel(&bases, prob, scale, rows, rng::derive_key(sc.seed, &path))?,
        None => {
            let mut eps = DMatrix::zeros(rows, n);
            for (i, spec) in specs.iter().enumerate() {
                let sampler = spec.sampler()?;
                let mut r = rng::stream(sc.seed, &[path[0], path[1], i as u64]);
                let mut col = vec![0.0; rows];
                sampler.fill(&mut r, &mut col);
                eps.column_mut(i).copy_from_slice(&col);
            }
            eps
        }
    };
    match &sc.var {
        None => ShockPanel::new(eps * sc.b0.matrix().transpose()),
        Some(v) => {
            let spec = VarSpec { lags: v.lags.clone(), b0: sc.b0.clone() };
            let y = simulate_var(&spec, &eps, v.burn_in)?;
            Ok(ols_var(&y, v.lags.len(), v.intercept)?.residuals)
        }
    }
}

/// Common-volatility shocks must share one regime process.
pub(crate) fn shared_regime(specs: &[ShockDistributionSpec]) -> Result<Option<(Vec<ShockDistributionSpec>, f64, f64)>> {
    let mut regime = None;
    let mut bases = Vec::new();
    let mut plain = 0;
    for s in specs {
        match s {
            ShockDistributionSpec::CommonVolatility { base, regime_prob, regime_scale } => {
                let this = (*regime_prob, *regime_scale);
                if regime.map_or(false, |r| r != this) {
                    return Err(Error::InvalidArgument("common-volatility shocks must share regime_prob and regime_scale".into()));
                }
                regime = Some(this);
                bases.push((**base).clone());
            }
            _ => plain += 1,
        }
    }
    match regime {
        None => Ok(None),
        Some(_) if plain > 0 => {
            Err(Error::InvalidArgument("common-volatility shocks cannot be mixed with other kinds".into()))
        }
        Some((p, s)) => Ok(Some((bases, p, s))),
    }
}

impl<'a> Context<'a> {
    fn new(sc: &'a Scenario, opts: EstimatorOptions) -> Result<Self> {
        sc.validate()?;
        let sys = sc.system()?;
        let dists = sc.shock_specs();
        let truth_avar = match true_avar(&sc.b0, &dists, &sys) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("true covariance unavailable ({e}); normalizing with an identity reference");
                None
            }
        };
        let n = sc.dim();
        let reference_avar = truth_avar.clone().unwrap_or_else(|| DMatrix::identity(n * n, n * n));
        let mut restrictions: Vec<_> = sc
            .tests
            .iter()
            .map(|t| match t {
                TestSpec::Full { .. } => inference::full_restriction(&sc.b0),
                TestSpec::Recursive { .. } => inference::recursive_restriction(n),
                TestSpec::Entry { row, col, value, .. } => inference::entry_restriction(n, row - 1, col - 1, *value),
            })
            .collect();
        if let Some(pc) = &sc.power_curve {
            restrictions.extend(pc.values.iter().map(|&v| inference::entry_restriction(n, pc.row - 1, pc.col - 1, v)));
        }
        Ok(Self { sc, sys, dists, reference_avar, truth_avar, restrictions, n_flags: sc.flag_columns().len(), opts })
    }

    fn replicate(&self, t_idx: usize, rep: usize, wanted: &[EstimatorKind]) -> Vec<(ReplicationRecord, Timing)> {
        let t = self.sc.sample_sizes[t_idx];
        let n = self.sc.dim();
        let panel = simulate_panel(self.sc, t_idx, rep);
        wanted
            .iter()
            .map(|&kind| {
                let start = Instant::now();
                let record = match &panel {
                    Ok(u) => self.estimate_one(kind, u, t, rep).unwrap_or_else(|e| {
                        log::debug!("T={t} rep={rep} {kind}: {e}");
                        ReplicationRecord::failed(t, rep, kind, n, self.n_flags)
                    }),
                    Err(e) => {
                        log::debug!("T={t} rep={rep}: simulation failed: {e}");
                        ReplicationRecord::failed(t, rep, kind, n, self.n_flags)
                    }
                };
                let timing = Timing { t, rep, estimator: kind, seconds: start.elapsed().as_secs_f64() };
                (record, timing)
            })
            .collect()
    }

    fn estimate_one(&self, kind: EstimatorKind, u: &ShockPanel, t: usize, rep: usize) -> Result<ReplicationRecord> {
        let sc = self.sc;
        let n = sc.dim();
        let mut res = estimate(kind, u, &self.sys, Some(&self.dists), &self.opts)?;
        res.normalize(&SignMode::Reference { b_ref: &sc.b0, avar: &self.reference_avar })?;
        let variances = res.innovation_variances(u)?;
        let beta = DVector::from_vec(res.b_hat.vec());
        let tt = u.t();
        let b0 = sc.b0.matrix();

        let per_basis: Vec<Option<DMatrix<f64>>> = sc
            .inference
            .iter()
            .map(|&basis| match basis {
                Basis::True => self.truth_avar.clone(),
                _ => res.avar_for(basis, u, &self.sys, Some(&self.dists)).ok(),
            })
            .collect();
        let mut flags = Vec::with_capacity(self.n_flags);
        for [r, c] in &sc.coefficients {
            let idx = (c - 1) * n + (r - 1);
            for v in &per_basis {
                flags.push(v.as_ref().and_then(|v| {
                    let (lo, hi) = inference::confidence_interval(idx, v, &beta, tt, sc.level).ok()?;
                    let truth = b0[(r - 1, c - 1)];
                    Some(lo <= truth && truth <= hi)
                }));
            }
        }
        for (rm, rv) in &self.restrictions {
            for v in &per_basis {
                flags.push(
                    v.as_ref()
                        .and_then(|v| inference::wald(rm, rv, &beta, v, tt).ok())
                        .map(|w| w.rejects(sc.alpha)),
                );
            }
        }
        debug_assert_eq!(flags.len(), self.n_flags);
        Ok(ReplicationRecord {
            t,
            rep,
            estimator: kind,
            ok: true,
            converged: res.converged,
            iterations: res.iterations,
            loss: res.loss,
            b_hat: res.b_hat.to_rows().into_iter().flatten().collect(),
            variances,
            flags,
        })
    }
}

fn load_existing(dir: &Path, sc: &Scenario, template: &RecordSet) -> Result<RecordSet> {
    let manifest_path = dir.join("manifest.json");
    let records_path = dir.join("records.csv");
    if manifest_path.exists() {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        if m.scenario_hash != sc.hash() {
            return Err(Error::InvalidArgument(format!(
                "{} holds results of a different scenario ('{}'); use another output directory",
                dir.display(),
                m.scenario
            )));
        }
    }
    if !records_path.exists() {
        return Ok(template.clone());
    }
    let mut text = fs::read_to_string(&records_path)?;
    // an interrupted append may leave a partial final line
    match text.rfind('\n') {
        Some(i) => text.truncate(i + 1),
        None => text.clear(),
    }
    if text.is_empty() {
        return Ok(template.clone());
    }
    let mut set = read_records(template, text.as_bytes())?;
    let mut seen = BTreeSet::new();
    set.records.retain(|r| seen.insert((r.t, r.rep, r.estimator)));
    set.records.retain(|r| template.sample_sizes.contains(&r.t) && r.rep < sc.replications);
    Ok(set)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Holds an exclusive lock on `<dir>/.lock` for the lifetime of the file.
fn lock_dir(dir: &Path) -> Result<fs::File> {
    let file = fs::OpenOptions::new().create(true).truncate(false).write(true).open(dir.join(".lock"))?;
    match file.try_lock() {
        Ok(()) => Ok(file),
        Err(fs::TryLockError::WouldBlock) => {
            Err(Error::InvalidArgument(format!("{} is in use by another run", dir.display())))
        }
        Err(fs::TryLockError::Error(e)) => Err(e.into()),
    }
}

/// Runs every `(T, rep, estimator)` combination not already present in the
/// output directory. Replication failures are recorded, never fatal.
pub fn run_scenario(sc: &Scenario, opts: &RunOptions) -> Result<RunOutput> {
    let ctx = Context::new(sc, opts.estimator)?;
    let template = RecordSet::empty(sc);
    let mut _lock = None;
    let mut existing = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            _lock = Some(lock_dir(dir)?);
            load_existing(dir, sc, &template)?
        }
        None => template.clone(),
    };
    let done: BTreeSet<_> = existing.records.iter().map(|r| (r.t, r.rep, r.estimator)).collect();
    let tasks: Vec<(usize, usize, Vec<EstimatorKind>)> = (0..sc.sample_sizes.len())
        .flat_map(|ti| (0..sc.replications).map(move |rep| (ti, rep)))
        .filter_map(|(ti, rep)| {
            let t = sc.sample_sizes[ti];
            let wanted: Vec<_> = sc.estimators.iter().copied().filter(|&e| !done.contains(&(t, rep, e))).collect();
            (!wanted.is_empty()).then_some((ti, rep, wanted))
        })
        .collect();
    log::info!("scenario '{}': {} replication tasks to run ({} records present)", sc.name, tasks.len(), done.len());

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;

    let (tx, rx) = mpsc::channel::<Vec<(ReplicationRecord, Timing)>>();
    let append_to = opts.out_dir.as_ref().map(|d| d.join("records.csv"));
    let header_needed = existing.records.is_empty();
    let writer_layout = template.clone();
    let writer = std::thread::spawn(move || -> Result<Vec<(ReplicationRecord, Timing)>> {
        let mut file = match &append_to {
            Some(path) => {
                if header_needed {
                    let mut buf = Vec::new();
                    write_records(&writer_layout, &mut buf)?;
                    fs::write(path, buf)?;
                }
                Some(csv::WriterBuilder::new().has_headers(false).from_writer(
                    fs::OpenOptions::new().append(true).open(path)?,
                ))
            }
            None => None,
        };
        let mut all = Vec::new();
        for batch in rx {
            if let Some(w) = file.as_mut() {
                for (r, _) in &batch {
                    w.write_record(writer_layout.row(r))?;
                }
                w.flush()?;
            }
            all.extend(batch);
        }
        Ok(all)
    });

    let total = tasks.len();
    let finished = std::sync::atomic::AtomicUsize::new(0);
    pool.install(|| {
        tasks.par_iter().for_each_with(tx, |tx, (ti, rep, wanted)| {
            let out = ctx.replicate(*ti, *rep, wanted);
            let k = finished.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
            if k % 50 == 0 || k == total {
                log::info!("{k}/{total} replication tasks done");
            }
            let _ = tx.send(out);
        });
    });
    let fresh = writer.join().map_err(|_| Error::InvalidArgument("record writer panicked".into()))??;

    let mut timings = Vec::with_capacity(fresh.len());
    for (r, timing) in fresh {
        existing.records.push(r);
        timings.push(timing);
    }
    existing.sort();
    let mut canonical = Vec::new();
    write_records(&existing, &mut canonical)?;

    let summaries: Vec<SummaryTable> = SummaryKind::ALL
        .iter()
        .filter_map(|&k| summarize(&existing, k).ok())
        .filter(|s| !s.rows.is_empty())
        .collect();

    let failures = existing.records.iter().filter(|r| !r.ok).count();
    let nonconverged = existing.records.iter().filter(|r| r.ok && !r.converged).count();
    let mut warnings = Vec::new();
    let bad = failures + nonconverged;
    if !existing.records.is_empty() && bad as f64 > 0.05 * existing.records.len() as f64 {
        warnings.push(format!(
            "{bad} of {} records failed or did not converge (more than 5%)",
            existing.records.len()
        ));
    }
    let mut notes = vec!["columns are normalized against b0 using the population covariance".to_string()];
    if sc.var.is_some() {
        notes.push("innovations are OLS residuals; inference ignores first-stage estimation error".into());
    }
    let manifest = Manifest {
        schema_version: RECORDS_SCHEMA_VERSION,
        homent_version: env!("CARGO_PKG_VERSION").into(),
        scenario: sc.name.clone(),
        scenario_hash: sc.hash(),
        seed: sc.seed,
        replications: sc.replications,
        sample_sizes: sc.sample_sizes.clone(),
        estimators: sc.estimators.clone(),
        records: existing.records.len(),
        failures,
        nonconverged,
        records_sha256: sha256_hex(&canonical),
        warnings,
        notes,
    };
    for w in &manifest.warnings {
        log::warn!("{w}");
    }

    if let Some(dir) = &opts.out_dir {
        write_atomic(&dir.join("records.csv"), &canonical)?;
        for s in &summaries {
            let mut buf = Vec::new();
            s.write_csv(&mut buf)?;
            write_atomic(&dir.join(format!("summary_{}.csv", s.kind.as_str())), &buf)?;
        }
        let timing_path = dir.join("timings.csv");
        let new_file = !timing_path.exists();
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&timing_path)?;
        if new_file {
            writeln!(f, "T,rep,estimator,seconds")?;
        }
        for t in &timings {
            writeln!(f, "{},{},{},{:.6}", t.t, t.rep, t.estimator.as_str(), t.seconds)?;
        }
        write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    }
    Ok(RunOutput { records: existing, summaries, manifest, timings })
}


#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(reps: usize) -> Scenario {
        Scenario::from_toml(&format!(
            r#"
name = "tiny"
b0 = [[10.0, 0.0], [5.0, 10.0]]
shocks = {{ kind = "gaussian_mixture", p = 0.79, mu1 = -0.2, s1 = 0.7, mu2 = 0.75, s2 = 1.5 }}
sample_sizes = [200, 400]
replications = {reps}
estimators = ["gmm_star", "csue2"]
coefficients = [[2, 1]]
seed = 11

[[tests]]
kind = "full"
name = "h0_full"

[power_curve]
row = 2
col = 1
values = [3.0, 5.0]
"#
        ))
        .unwrap()
    }

    #[test]
    fn smoke_run_has_one_record_per_combination() {
        let sc = scenario(1);
        let out = run_scenario(&sc, &RunOptions { threads: Some(1), ..Default::default() }).unwrap();
        assert_eq!(out.records.records.len(), 4);
        assert_eq!(out.manifest.records, 4);
        assert!(out.records.records.iter().all(|r| r.ok));
        assert_eq!(out.summaries.len(), 5);
    }

    #[test]
    fn thread_count_does_not_change_records() {
        let sc = scenario(3);
        let a = run_scenario(&sc, &RunOptions { threads: Some(1), ..Default::default() }).unwrap();
        let b = run_scenario(&sc, &RunOptions { threads: Some(3), ..Default::default() }).unwrap();
        assert_eq!(a.manifest.records_sha256, b.manifest.records_sha256);
    }

    #[test]
    fn resumes_from_partial_records() {
        let dir = tempfile::tempdir().unwrap();
        let sc = scenario(2);
        let full = run_scenario(&sc, &RunOptions { threads: Some(2), out_dir: Some(dir.path().into()), ..Default::default() }).unwrap();
        let text = fs::read_to_string(dir.path().join("records.csv")).unwrap();
        // keep the header and three records, plus a torn line
        let mut lines: Vec<&str> = text.lines().take(4).collect();
        lines.push("tiny,400,1,gm");
        fs::write(dir.path().join("records.csv"), lines.join("\n")).unwrap();
        let resumed = run_scenario(&sc, &RunOptions { threads: Some(1), out_dir: Some(dir.path().into()), ..Default::default() }).unwrap();
        assert_eq!(resumed.timings.len(), full.records.records.len() - 3);
        assert_eq!(resumed.manifest.records_sha256, full.manifest.records_sha256);
        assert_eq!(fs::read_to_string(dir.path().join("records.csv")).unwrap(), text);

        let mut other = sc.clone();
        other.seed += 1;
        assert!(run_scenario(&other, &RunOptions { out_dir: Some(dir.path().into()), ..Default::default() }).is_err());
    }

    #[test]
    fn simulated_panels_are_reproducible_and_distinct() {
        let sc = scenario(2);
        let a = simulate_panel(&sc, 0, 1).unwrap();
        assert_eq!(a, simulate_panel(&sc, 0, 1).unwrap());
        assert_ne!(a, simulate_panel(&sc, 0, 0).unwrap());
        assert_eq!(a.t(), 200);
    }

    #[test]
    fn var_residual_panels_keep_the_sample_size() {
        let mut sc = scenario(1);
        sc.var = Some(super::super::VarScenario { lags: vec![vec![vec![0.5, 0.0], vec![0.1, 0.5]]], burn_in: 50, intercept: true });
        assert_eq!(simulate_panel(&sc, 1, 0).unwrap().t(), 400);
    }

    #[test]
    fn output_directory_is_exclusive() {
        let sc = scenario(2);
        let dir = tempfile::tempdir().unwrap();
        let held = lock_dir(dir.path()).unwrap();
        let err = run_scenario(&sc, &RunOptions { out_dir: Some(dir.path().into()), ..Default::default() }).unwrap_err();
        assert!(err.to_string().contains("in use"), "{err}");
        drop(held);
        run_scenario(&sc, &RunOptions { out_dir: Some(dir.path().into()), ..Default::default() }).unwrap();
    }
}
