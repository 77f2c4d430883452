use clap::Parser;
use phri_core::cli::{dispatch, init_logging, Cli};

fn main() {
    init_logging();
    let cli = Cli::parse();
    std::process::exit(dispatch(&cli).code());
}
