use clap::Parser;
use evipar_cli::{exit_code, init_threads, run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads().and_then(|_| run(cli)) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
