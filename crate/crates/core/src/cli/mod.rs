//! Command-line front end.

mod data;
mod estimate;
mod moments;
mod noise;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::mc::{run_scenario, RunOptions, Scenario};

pub use data::read_matrix_csv;

/// Version tag written into every JSON output.
pub const OUTPUT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "homent", version, about = "Higher-order moment estimation of SVAR impact matrices")]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate B from a CSV of observables or reduced-form shocks.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo scenario.
    Simulate(SimulateArgs),
    /// Decompose the expected loss over a grid of innovation rescalings.
    NoiseAnalyze(NoiseArgs),
    /// Population moment table of a shock distribution.
    Moments(MomentsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightingArg {
    Si,
    Smi,
    True,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InferenceArg {
    Smi,
    Si,
}

#[derive(Debug, clap::Args)]
pub struct EstimateArgs {
    /// Headed CSV with one column per variable.
    pub data: PathBuf,
    /// TOML file with estimation settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for estimate.json and innovations.csv.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Fit a VAR(P) by OLS first and estimate on its residuals.
    #[arg(long, value_name = "P")]
    pub lags: Option<usize>,
    /// Estimator name (gmm2, csue2, cue_si, cue_smi, csue_si, gmm_star, csue_star).
    #[arg(long)]
    pub estimator: Option<String>,
    /// Second-step weighting; replaces the estimator's own choice.
    #[arg(long, value_enum)]
    pub weighting: Option<WeightingArg>,
    /// Rescale the weighting by the innovation scale diagonal.
    #[arg(long, value_enum)]
    pub scale_updating: Option<OnOff>,
    /// Basis for the asymptotic covariance.
    #[arg(long, value_enum)]
    pub inference: Option<InferenceArg>,
    /// Validate inputs and print the plan without estimating.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, clap::Args)]
pub struct SimulateArgs {
    /// Scenario file (TOML or JSON).
    #[arg(required_unless_present = "config")]
    pub scenario: Option<PathBuf>,
    /// Scenario file, as an alternative to the positional argument.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Override the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the number of replications.
    #[arg(long)]
    pub replications: Option<usize>,
    /// Output directory; an existing run there is resumed.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Validate the scenario and print the resolved plan.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, clap::Args)]
pub struct NoiseArgs {
    /// TOML file describing the design and the scaling grid.
    #[arg(long)]
    pub config: PathBuf,
    /// Write noise.json here instead of printing it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Validate the design and print it without computing.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, clap::Args)]
pub struct MomentsArgs {
    /// TOML file holding one shock distribution (`kind = ...`).
    #[arg(long, required_unless_present = "spec")]
    pub config: Option<PathBuf>,
    /// Inline JSON distribution, e.g. '{"kind":"student_t","nu":9}'.
    #[arg(long)]
    pub spec: Option<String>,
    /// Write moments.json here instead of printing it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Validate the design and print it without computing.
    #[arg(long)]
    pub dry_run: bool,
}

/// Exit status for an error: 2 for bad input, 3 for numerical failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::SingularMatrix { .. } | Error::DegenerateInnovation { .. } | Error::Unidentified(_) => 3,
        _ => 2,
    }
}

/// Parses a TOML file, mapping syntax errors to their line.
pub(crate) fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(crate::error::at_path(path))?;
    toml::from_str(&text).map_err(|e| {
        let line = e.span().map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
        Error::Input { line, message: format!("{}: {}", path.display(), e.message()) }
    })
}

/// Prints to stdout; a closed pipe is not an error.
pub(crate) fn print_out(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.write_all(b"\n")).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

pub(crate) fn write_json<T: serde::Serialize>(value: &T, out: Option<&Path>, file: &str) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(file), text + "\n")?;
        }
        None => print_out(&text)?,
    }
    Ok(())
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    let is_json = path.extension().and_then(|e| e.to_str()) == Some("json");
    if is_json {
        return Scenario::load(path);
    }
    let sc: Scenario = read_toml(path)?;
    sc.validate()?;
    Ok(sc)
}

fn simulate(args: &SimulateArgs) -> Result<i32> {
    let path = args.scenario.as_ref().or(args.config.as_ref()).expect("clap enforces a scenario");
    let mut sc = load_scenario(path)?;
    if let Some(s) = args.seed {
        sc.seed = s;
    }
    if let Some(r) = args.replications {
        sc.replications = r;
    }
    sc.validate()?;
    if args.dry_run {
        let sys = sc.system()?;
        let plan = serde_json::json!({
            "schema_version": OUTPUT_SCHEMA_VERSION,
            "scenario": sc,
            "scenario_hash": sc.hash(),
            "moment_conditions": sys.len(),
            "records": sc.replications * sc.sample_sizes.len() * sc.estimators.len(),
            "flag_columns": sc.flag_columns(),
            "out": args.out,
        });
        print_out(&serde_json::to_string_pretty(&plan)?)?;
        return Ok(0);
    }
    let out = run_scenario(
        &sc,
        &RunOptions { threads: args.threads, out_dir: Some(args.out.clone()), ..Default::default() },
    )?;
    let m = &out.manifest;
    print_out(&format!(
        "{}: {} records ({} failed, {} not converged) in {}; records sha256 {}",
        m.scenario,
        m.records,
        m.failures,
        m.nonconverged,
        args.out.display(),
        m.records_sha256
    ))?;
    for w in &m.warnings {
        eprintln!("warning: {w}");
    }
    Ok(0)
}

/// Runs the parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let _ = env_logger::Builder::new().parse_filters(&cli.log).try_init();
    let result = match &cli.command {
        Command::Estimate(a) => estimate::run(a),
        Command::Simulate(a) => simulate(a),
        Command::NoiseAnalyze(a) => noise::run(a),
        Command::Moments(a) => moments::run(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
