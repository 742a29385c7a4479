use std::process::ExitCode;

use clap::Parser;
use cleftkit_cli::{run, Cli, Failure};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let default_level = if matches!(cli.command, cleftkit_cli::Command::Serve { .. }) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .init();

    let result = std::panic::catch_unwind(|| run(cli, &mut std::io::stdout().lock()));
    match result {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(f)) => {
            let kind = match f {
                Failure::User(_) => "error",
                Failure::Internal(_) => "internal error",
            };
            eprintln!("{kind}: {:#}", f.error());
            ExitCode::from(f.exit_code() as u8)
        }
        // The panic hook has already printed the message.
        Err(_) => ExitCode::from(2),
    }
}
