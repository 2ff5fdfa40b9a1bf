use clap::Parser;
use std::process::ExitCode;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_env(
            modgate_cli::config::ENV_LOG,
        ))
        .with_writer(std::io::stderr)
        .init();
    let cli = modgate_cli::Cli::parse();
    match modgate_cli::run(cli) {
        Ok(out) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&out).expect("output serializes")
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
