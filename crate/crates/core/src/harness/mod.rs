//! Config-driven runs, sweeps, plot files and the canned sensitivity table.

pub mod config;
pub mod plot;
pub mod run;
pub mod sweep;
pub mod table1;

pub use config::{ExperimentConfig, SweepSpec};
pub use plot::emit_plotdata;
pub use run::{build_instance, run_experiment, run_on, Instance, RunResult, RunSummary};
pub use sweep::{run_sweep, sweep_table};
pub use table1::{run_table1, table1_config};
