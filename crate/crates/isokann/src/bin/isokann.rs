use clap::Parser;

use isokann::cli::{init_threads, run_cli, Cli, EXIT_ERROR};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let code = init_threads(cli.threads).and_then(|()| run_cli(cli)).unwrap_or_else(|e| {
        eprintln!("error: {e}");
        EXIT_ERROR
    });
    std::process::exit(code);
}
