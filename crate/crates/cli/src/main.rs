//! Batch entry point: `aste <train|eval|predict|inspect>` over flat
//! key=value config files with `--key value` overrides.

mod commands;
mod config;

use std::process::ExitCode;

use anyhow::{bail, Result};

fn run() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = args.first() else {
        bail!("usage: aste <train|eval|predict|inspect> [--config <path>] [--key value ...]");
    };
    let cfg = config::from_args(&args[1..])?;
    aste_core::numerics::set_precision(cfg.precision());
    print!("{}", cfg.echo());
    match command.as_str() {
        "train" => commands::cmd_train(&cfg),
        "eval" => commands::cmd_eval(&cfg),
        "predict" => commands::cmd_predict(&cfg),
        "inspect" => commands::cmd_inspect(&cfg),
        other => bail!("unknown command `{other}` (want train, eval, predict, or inspect)"),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
