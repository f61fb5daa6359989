//! Scenario-driven Monte Carlo harness: simulate, estimate, normalize and
//! infer per replication, then aggregate records into summary tables.

mod record;
mod run;
mod scenario;
mod summary;

pub use record::{read_records, sha256_hex as record_hash, write_records, RecordSet, ReplicationRecord, RECORDS_SCHEMA_VERSION};
pub use run::{run_scenario, simulate_panel, Manifest, RunOptions, RunOutput, Timing};
pub use scenario::{coef_name, PowerCurveSpec, Scenario, ShockSpecs, TestSpec, VarScenario};
pub use summary::{summarize, SummaryKind, SummaryTable};
