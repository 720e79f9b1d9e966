use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command as ClapCommand};
use pdelab_cli::{deterministic_from_env, run, CliError, Command, ExperimentConfig, RunOptions, DETERMINISTIC_ENV};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn cli() -> ClapCommand {
    let mut app = ClapCommand::new("pdelab")
        .about("Diffusion-on-sequences experiments")
        .after_help(format!(
            "Set {DETERMINISTIC_ENV}=1 for single-threaded, byte-reproducible CSV output."
        ))
        .subcommand_required(true);
    for c in Command::ALL {
        let mut sub = ClapCommand::new(c.as_str())
            .about(c.about())
            .arg(
                Arg::new("config")
                    .long("config")
                    .value_name("FILE")
                    .help("key = value file; command-line flags override it"),
            )
            .arg(
                Arg::new("out")
                    .long("out")
                    .value_name("PATH")
                    .help("CSV output path [default: <subcommand>.csv]"),
            );
        for k in c.keys() {
            sub = sub.arg(
                Arg::new(k.name)
                    .long(k.name)
                    .value_name("VALUE")
                    .action(ArgAction::Set)
                    .help(format!("{} [default: {}]", k.help, k.default)),
            );
        }
        app = app.subcommand(sub);
    }
    app
}

fn resolve(command: Command, m: &ArgMatches) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::new(command);
    if let Some(path) = m.get_one::<String>("config") {
        cfg.apply_file(&fs::read_to_string(path)?)?;
    }
    for k in command.keys() {
        if let Some(v) = m.get_one::<String>(k.name) {
            cfg.set(k.name, v)?;
        }
    }
    Ok(cfg)
}

fn execute(command: Command, m: &ArgMatches) -> Result<bool, CliError> {
    let cfg = resolve(command, m)?;
    let opts = RunOptions {
        deterministic: deterministic_from_env(),
    };
    let outcome = run(&cfg, opts)?;
    let out = m
        .get_one::<String>("out")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(format!("{command}.csv")));
    fs::write(&out, &outcome.csv)?;
    println!("{command}: wrote {}", out.display());
    for line in &outcome.summary {
        println!("{line}");
    }
    Ok(outcome.passed())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let command: Command = name.parse().expect("clap only accepts known subcommands");
    match execute(command, sub) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
