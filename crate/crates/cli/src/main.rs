use clap::Parser;
use tunnelwatch::{execute, Cli};

fn main() {
    std::process::exit(execute(Cli::parse()));
}
