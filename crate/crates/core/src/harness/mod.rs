//! Run configuration, manifests and the command implementations behind the CLI.

pub mod commands;
pub mod config;
pub mod manifest;

pub use commands::{
    cmd_certify, cmd_ou_validate, cmd_replay, cmd_simulate, cmd_sweep, read_certificate_csv,
    run_command, CommandOutcome, ExitStatus, ReplayOutcome, SimulateOptions,
};
pub use config::{InitialState, NuSpec, RunConfig};
pub use manifest::RunManifest;
