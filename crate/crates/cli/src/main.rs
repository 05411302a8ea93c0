//! `nsrenorm` command-line harness.
//!
//! Every config key has a flag: dots and underscores become dashes, so
//! `forcing.kind` is `--forcing-kind` and `estimator.climb_steps` is
//! `--estimator-climb-steps`. Values given on the command line win over
//! `NSRENORM_*` environment variables, which win over `--config PATH`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use nsrenorm::error::Error;
use nsrenorm::harness::config::CONFIG_KEYS;
use nsrenorm::harness::{
    cmd_certify, cmd_ou_validate, cmd_replay, cmd_simulate, cmd_sweep, CommandOutcome, ExitStatus,
    RunConfig, SimulateOptions,
};

fn flag_name(key: &str) -> String {
    key.replace(['.', '_'], "-")
}

fn config_args() -> Vec<Arg> {
    CONFIG_KEYS
        .iter()
        .map(|key| {
            let name = flag_name(key);
            let mut arg = Arg::new(*key)
                .long(name)
                .value_name("VALUE")
                .help(format!(
                    "config key `{key}` (env {})",
                    RunConfig::env_name(key)
                ))
                .global(true);
            arg = match *key {
                "out_dir" => arg.visible_alias("out"),
                "sweep.nu_grid" => arg.visible_alias("nu-grid"),
                "sweep.n_grid" => arg.visible_alias("n-grid"),
                _ => arg,
            };
            arg
        })
        .collect()
}

fn cli() -> Command {
    Command::new("nsrenorm")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Renormed-norm dissipativity certificates and ball-invariance experiments for spectral Navier-Stokes")
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("PATH")
                .global(true)
                .help("flat key = value config file"),
        )
        .arg(
            Arg::new("print-config")
                .long("print-config")
                .action(ArgAction::SetTrue)
                .global(true)
                .help("print the resolved config and exit"),
        )
        .args(config_args())
        .subcommand(Command::new("certify").about("estimate constants, build the certificate and run all audits"))
        .subcommand(
            Command::new("simulate")
                .about("integrate trajectories and report the ball-invariance verdict")
                .arg(Arg::new("certificate").long("certificate").value_name("PATH").help("certificate.csv to use"))
                .arg(
                    Arg::new("uncertified")
                        .long("uncertified")
                        .action(ArgAction::SetTrue)
                        .help("run without a certificate; the verdict is NO-CLAIM"),
                )
                .arg(
                    Arg::new("stokes-only")
                        .long("stokes-only")
                        .action(ArgAction::SetTrue)
                        .help("drop the nonlinear term"),
                ),
        )
        .subcommand(Command::new("sweep").about("certificate phase diagram over --nu-grid and/or M(N) over --n-grid"))
        .subcommand(Command::new("ou-validate").about("Ornstein-Uhlenbeck renorming audit"))
        .subcommand(
            Command::new("replay")
                .about("rerun a manifest and compare output hashes")
                .arg(Arg::new("manifest").required(true).value_name("MANIFEST"))
                .arg(Arg::new("into").long("into").value_name("DIR").help("output directory of the rerun")),
        )
}

fn resolve_config(m: &ArgMatches, sub: &ArgMatches) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    let path = sub
        .get_one::<String>("config")
        .or_else(|| m.get_one::<String>("config"));
    if let Some(path) = path {
        cfg.merge_file(&PathBuf::from(path))?;
    }
    cfg.merge_env(std::env::vars())?;
    for key in CONFIG_KEYS {
        if let Some(v) = sub
            .get_one::<String>(key)
            .or_else(|| m.get_one::<String>(key))
        {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(outcome: &CommandOutcome) {
    for line in &outcome.messages {
        println!("{line}");
    }
    println!("outputs: {}", outcome.out_dir.display());
}

fn run(m: &ArgMatches) -> Result<ExitStatus, Error> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    if name == "replay" {
        let manifest = PathBuf::from(sub.get_one::<String>("manifest").expect("required"));
        let into = sub.get_one::<String>("into").map(PathBuf::from);
        let r = cmd_replay(&manifest, into.as_deref())?;
        report(&r.rerun);
        for (file, ok) in &r.files {
            println!("{} {file}", if *ok { "MATCH" } else { "MISMATCH" });
        }
        return Ok(r.status);
    }
    let cfg = resolve_config(m, sub)?;
    if sub.get_flag("print-config") {
        print!("{}", cfg.to_text());
        return Ok(ExitStatus::Success);
    }
    let outcome = match name {
        "certify" => cmd_certify(&cfg)?,
        "simulate" => cmd_simulate(
            &cfg,
            &SimulateOptions {
                certificate: sub.get_one::<String>("certificate").map(PathBuf::from),
                uncertified: sub.get_flag("uncertified"),
                stokes_only: sub.get_flag("stokes-only"),
            },
        )?,
        "sweep" => cmd_sweep(&cfg)?,
        "ou-validate" => cmd_ou_validate(&cfg)?,
        _ => unreachable!("clap rejects unknown subcommands"),
    };
    report(&outcome);
    Ok(outcome.status)
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let status = run(&matches).unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitStatus::of_error(&e)
    });
    ExitCode::from(status.code() as u8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn flags_mirror_keys() {
        let m = cli()
            .try_get_matches_from([
                "nsrenorm",
                "certify",
                "--grid-n",
                "8",
                "--forcing-kind",
                "steady",
                "--nu-grid",
                "0.1,0.2",
            ])
            .unwrap();
        let (_, sub) = m.subcommand().unwrap();
        let cfg = resolve_config(&m, sub).unwrap();
        assert_eq!(cfg.grid_n, 8);
        assert_eq!(cfg.sweep_nu_grid.len(), 2);
    }
}
