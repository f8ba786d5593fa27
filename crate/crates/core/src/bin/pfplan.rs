use clap::Parser;
use pfplan_core::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
