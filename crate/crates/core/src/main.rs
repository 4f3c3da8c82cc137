use std::process::ExitCode;

use clap::Parser;
use seqtrans::cli::{run, Cli};

fn main() -> ExitCode {
    run(Cli::parse())
}
