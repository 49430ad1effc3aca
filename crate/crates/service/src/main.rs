use clap::Parser;
use echo_agent_service::cli::{run, Cli};
use tracing_subscriber::EnvFilter;

fn main() {
    // Logs go to stderr; stdout carries results and tool frames.
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(e.exit_code());
    }
}
