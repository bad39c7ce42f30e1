use clap::Parser;
use ekf_contraction::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    std::process::exit(run(&cli.command));
}
