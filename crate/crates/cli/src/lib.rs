//! Experiment runner: resolves experiment specs into mapping plans, runs the
//! compiler, simulators and cost models, and writes CSV rows with the
//! artifacts each row is computed from.

pub mod events;
pub mod run;
pub mod spec;
pub mod verify;

pub use run::{csv_bytes, read_csv, rebuild, run, sweep, sweep_to_dir, Outcome, Row, SweepSummary, COLUMNS};
pub use spec::{expand, resolve, ExperimentSpec, Resolved, StrategyArg};
pub use verify::{verify, VerifyReport};
