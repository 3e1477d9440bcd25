use clap::Parser;
use tsvos_cli::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {:#}", e.source);
        std::process::exit(e.code);
    }
}
