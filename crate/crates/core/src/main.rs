use std::process::ExitCode;

use clap::Parser;
use mhcvse::cli::{run, Cli};

fn main() -> ExitCode {
    run(Cli::parse())
}
