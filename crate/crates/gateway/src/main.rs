use std::process::ExitCode;

use annoprop_gateway::cli::{self, Cli, Command};
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve { .. } => tokio::runtime::Runtime::new()
            .map_err(|e| annoprop_gateway::CliError::Runtime(e.to_string()))
            .and_then(|rt| rt.block_on(cli::serve(&cli))),
        _ => cli::run(&cli).map(|out| print!("{out}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("annoprop: {}", e.to_string().lines().next().unwrap_or("error"));
            ExitCode::from(e.exit_code())
        }
    }
}
