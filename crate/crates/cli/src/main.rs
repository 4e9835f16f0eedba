//! `landuse`: land-use mapping pipeline driver.

mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use serde_json::json;

use config::Config;
use pipeline::Command;

#[derive(Parser, Debug)]
#[command(name = "landuse", version, about = "Land-use mapping from geotagged images")]
struct Cli {
    /// Pipeline stage to run
    #[arg(value_enum)]
    command: Command,
    /// Flat key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides, applied after the file
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = Config::load(cli.config.as_deref(), &cli.overrides).context("loading config")?;
    pipeline::run(cli.command, cfg)?;
    Ok(())
}

fn error_line(kind: &str, message: &str) {
    eprintln!("{}", json!({"error": {"kind": kind, "message": message}}));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            error_line("usage", e.kind().as_str().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = err.chain().find_map(|e| e.downcast_ref::<landuse_core::Error>()).map_or("io", |e| e.kind());
            let message = format!("{err:#}").replace('\n', " ");
            error_line(kind, &message);
            ExitCode::FAILURE
        }
    }
}
